use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::process::{Command, Stdio};

use metaros::datalogger::read_log;
use metaros::transport::{serve_listener, BrokerConfig, BrokerHandle};

fn metaros() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_metaros"));
    c.env_remove("METAROS_BROKER");
    c
}

fn tcp_broker() -> (BrokerHandle, String) {
    let b = serve_listener(TcpListener::bind("127.0.0.1:0").unwrap(), BrokerConfig::default()).unwrap();
    let addr = format!("tcp://{}", b.address().target);
    (b, addr)
}

/// Spawns a long-running subcommand and waits for its readiness line.
fn spawn_ready(args: &[&str]) -> std::process::Child {
    let mut child = metaros().args(args).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    let mut err = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    err.read_line(&mut line).unwrap();
    assert!(line.starts_with("subscribed") || line.starts_with("recording"), "{line}");
    // keep draining so later diagnostics never hit a closed pipe
    std::thread::spawn(move || std::io::copy(&mut err, &mut std::io::sink()));
    child
}

#[test]
fn unknown_flag_exits_2() {
    let out = metaros().args(["graph", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bench_throughput_writes_one_csv_row_per_size() {
    let out = metaros()
        .args(["bench", "throughput", "--transport", "inproc", "--payload-sizes", "256", "--duration", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines[0].starts_with("# ") && lines[0].contains("seed="));
    assert_eq!(lines[1], "payload_size,msg_per_s,bit_per_s,p50_latency,p99_latency,cpu_mean");
    let fields: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(fields.len(), 6);
    assert_eq!(fields[0], "256");
    assert!(fields[1].parse::<f64>().unwrap() > 0.0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("msg_per_s"));
}

#[test]
fn echo_prints_every_published_frame() {
    let (_broker, addr) = tcp_broker();
    let echo = spawn_ready(&["echo", "--broker", &addr, "--topic", "a/*", "--count", "25", "--duration", "20"]);
    let status = metaros()
        .args(["pub", "--broker", &addr, "--topic", "a/b", "--type", "int64", "--rate", "200", "--count", "25"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = echo.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 25, "{text}");
    assert!(lines.iter().all(|l| l.starts_with("a/b INT64 ")));
    assert!(lines[24].ends_with(" 24"));
}

#[test]
fn sub_prints_typed_values() {
    let (_broker, addr) = tcp_broker();
    let sub = spawn_ready(&["sub", "--broker", &addr, "--topic", "words", "--type", "string", "--count", "5", "--duration", "20"]);
    let status = metaros()
        .args(["pub", "--broker", &addr, "--topic", "words", "--type", "string", "--rate", "100", "--count", "5", "--payload-size", "4"])
        .status()
        .unwrap();
    assert!(status.success());
    let text = String::from_utf8(sub.wait_with_output().unwrap().stdout).unwrap();
    assert_eq!(text.lines().count(), 5, "{text}");
    assert!(text.lines().next().unwrap().contains("msg 0"));
}

#[test]
fn graph_prints_json() {
    let (_broker, addr) = tcp_broker();
    let out = metaros().args(["graph", "--broker", &addr]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let nodes = v["nodes"].as_array().unwrap();
    assert!(nodes.iter().any(|n| n.as_str().unwrap().starts_with("metaros_graph_")));
    assert!(v["topics"].is_array());
}

#[test]
fn log_record_then_replay() {
    let (_broker, addr) = tcp_broker();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cli.mroslog");
    let path_s = path.to_str().unwrap();
    let rec = spawn_ready(&["log", "record", "--broker", &addr, "--topic", "cam/*", "--output", path_s, "--count", "10", "--duration", "20"]);
    let status = metaros()
        .args(["pub", "--broker", &addr, "--topic", "cam/raw", "--type", "bytes", "--rate", "100", "--count", "10", "--payload-size", "64"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(rec.wait_with_output().unwrap().status.success());
    let log = read_log(&path).unwrap();
    assert_eq!(log.frames.len(), 10);
    assert!(log.frames.iter().all(|f| f.payload.len() == 64));

    let echo = spawn_ready(&["echo", "--broker", &addr, "--topic", "cam/raw", "--count", "10", "--duration", "20"]);
    let out = metaros().args(["log", "replay", "--broker", &addr, "--input", path_s, "--mode", "fast"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(echo.wait_with_output().unwrap().stdout).unwrap();
    assert_eq!(text.lines().count(), 10, "{text}");
}

#[test]
fn bench_reliability_delivers_all_under_loss() {
    let out = metaros()
        .args(["bench", "reliability", "--drop", "0.2", "--reliable", "--count", "10000"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines().skip(1);
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let field = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(field("delivered"), "10000");
    assert_eq!(field("duplicates"), "0");
    assert_eq!(field("in_order"), "true");
}
