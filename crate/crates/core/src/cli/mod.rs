//! The `metaros` command line.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::envelope::PayloadType;
use crate::transport::{EndpointAddress, BROKER_ENV};

#[derive(Debug, Parser)]
#[command(name = "metaros", version, about = "Broker, pub/sub tools, introspection, logging and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct BrokerArg {
    /// Broker address, `tcp://host:port` or `inproc://key`.
    #[arg(long, env = BROKER_ENV, default_value = "tcp://127.0.0.1:7447")]
    pub broker: EndpointAddress,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct StopArgs {
    /// Stop after this many messages.
    #[arg(long)]
    pub count: Option<u64>,
    /// Stop after this many seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs a broker.
    Broker {
        #[arg(long, default_value = "tcp://0.0.0.0:7447")]
        listen: EndpointAddress,
        /// Stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Publishes generated values at a fixed rate.
    Pub {
        #[command(flatten)]
        broker: BrokerArg,
        #[arg(long)]
        topic: String,
        #[arg(long = "type", value_parser = parse_type)]
        payload_type: PayloadType,
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
        #[arg(long, default_value_t = 16)]
        payload_size: usize,
        #[arg(long)]
        reliable: bool,
        #[command(flatten)]
        stop: StopArgs,
    },
    /// Prints values received on a typed topic.
    Sub {
        #[command(flatten)]
        broker: BrokerArg,
        #[arg(long)]
        topic: String,
        #[arg(long = "type", value_parser = parse_type)]
        payload_type: PayloadType,
        #[arg(long)]
        reliable: bool,
        #[command(flatten)]
        stop: StopArgs,
    },
    /// Prints every frame matching a topic or pattern, whatever its type.
    Echo {
        #[command(flatten)]
        broker: BrokerArg,
        #[arg(long)]
        topic: String,
        #[command(flatten)]
        stop: StopArgs,
    },
    /// Prints the broker's node graph as JSON.
    Graph {
        #[command(flatten)]
        broker: BrokerArg,
    },
    /// Records or replays frame logs.
    Log {
        #[command(subcommand)]
        action: LogCommand,
    },
    /// Runs a self-benchmark and writes CSV.
    Bench(BenchArgs),
}

#[derive(Debug, Subcommand)]
pub enum LogCommand {
    Record {
        #[command(flatten)]
        broker: BrokerArg,
        /// Topic or pattern to record; repeatable.
        #[arg(long = "topic", required = true)]
        topics: Vec<String>,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        stop: StopArgs,
    },
    Replay {
        #[command(flatten)]
        broker: BrokerArg,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ReplayModeArg::Timed)]
        mode: ReplayModeArg,
        #[arg(long)]
        reliable: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReplayModeArg {
    Timed,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    Throughput,
    Latency,
    Reliability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub kind: BenchKind,
    #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
    pub transport: TransportArg,
    /// Comma-separated payload sizes in bytes.
    #[arg(long, value_delimiter = ',', default_values_t = crate::bench::DEFAULT_PAYLOAD_SIZES)]
    pub payload_sizes: Vec<usize>,
    /// Seconds per payload size in throughput runs.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    /// Messages per latency or reliability run.
    #[arg(long, default_value_t = 1000)]
    pub count: u64,
    #[arg(long)]
    pub drop: Option<f64>,
    #[arg(long)]
    pub duplicate: Option<f64>,
    /// Fixed delay added to every published frame.
    #[arg(long)]
    pub delay_ms: Option<f64>,
    #[arg(long)]
    pub reliable: bool,
    #[arg(long, default_value_t = crate::bench::DEFAULT_SEED)]
    pub seed: u64,
    /// CSV destination; standard output when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

fn parse_type(s: &str) -> Result<PayloadType, String> {
    PayloadType::parse(s).ok_or_else(|| format!("unknown payload type {s}"))
}

/// Parses `argv` (program name first) and runs the command, returning the
/// process exit code. Usage errors give 2.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("metaros: {e}");
            1
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(cli_main(std::env::args_os()).clamp(0, 255) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(cli_main(["metaros", "graph", "--bogus"]), 2);
        assert_eq!(cli_main(["metaros", "frobnicate"]), 2);
        assert_eq!(cli_main(["metaros", "pub", "--topic", "a", "--type", "nope"]), 2);
    }

    #[test]
    fn bench_flags_parse() {
        let cli = Cli::try_parse_from([
            "metaros", "bench", "reliability", "--drop", "0.2", "--reliable", "--count", "10000",
            "--payload-sizes", "256,4096", "--transport", "tcp",
        ])
        .unwrap();
        let Command::Bench(b) = cli.command else { panic!() };
        assert_eq!(b.kind, BenchKind::Reliability);
        assert_eq!(b.payload_sizes, vec![256, 4096]);
        assert_eq!((b.drop, b.reliable, b.count), (Some(0.2), true, 10_000));
        assert_eq!(b.transport, TransportArg::Tcp);
    }

    #[test]
    fn broker_address_flag() {
        let cli = Cli::try_parse_from(["metaros", "graph", "--broker", "inproc://x"]).unwrap();
        let Command::Graph { broker } = cli.command else { panic!() };
        assert_eq!(broker.broker, EndpointAddress::inproc("x"));
    }
}
