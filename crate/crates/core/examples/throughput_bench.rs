//! Short throughput and latency runs over the in-process transport.

use std::time::Duration;

use metaros::bench::{self, BenchScenario, BenchTransport};
use metaros::transport::FaultProfile;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = BenchScenario::new(BenchTransport::Inproc)
        .with_payload_sizes(vec![256, 4096])
        .with_duration(Duration::from_secs(1));
    let rows: Vec<_> = bench::run_throughput(&scenario)?.into_iter().map(|l| l.row).collect();
    bench::write_rows_csv(std::io::stdout(), &scenario, "throughput", &rows)?;
    print!("{}", bench::summary_table(&rows));

    let delayed = scenario
        .with_payload_sizes(vec![256])
        .with_count(500)
        .with_faults(FaultProfile::default().with_delay(Duration::from_millis(5), Duration::from_millis(5)));
    let rows: Vec<_> = bench::run_latency(&delayed)?.into_iter().map(|l| l.row).collect();
    print!("{}", bench::summary_table(&rows));
    Ok(())
}
