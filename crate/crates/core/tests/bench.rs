use std::time::Duration;

use metaros::bench::{run_latency, run_reliability, run_throughput, loopback_reliable_qos, BenchScenario, BenchTransport};
use metaros::transport::FaultProfile;

fn short(transport: BenchTransport, sizes: Vec<usize>) -> BenchScenario {
    BenchScenario::new(transport)
        .with_payload_sizes(sizes)
        .with_duration(Duration::from_secs(1))
}

#[test]
fn throughput_bits_follow_frame_size() {
    let legs = run_throughput(&short(BenchTransport::Inproc, vec![256, 4096])).unwrap();
    for leg in &legs {
        println!("{:?}", leg);
        // independent oracle: 46-byte header, topic bytes, payload bytes
        let frame = 46 + "bench/throughput".len() + leg.row.payload_size;
        assert_eq!(leg.frame_len, frame);
        assert_eq!(leg.bits, leg.delivered * frame as u64 * 8);
        let expected = leg.row.msg_per_s * (frame * 8) as f64;
        assert!((leg.row.bit_per_s - expected).abs() <= expected * 1e-12);
        assert_eq!(leg.delivered, leg.sent);
    }
}

#[test]
fn tcp_throughput_runs() {
    let legs = run_throughput(&short(BenchTransport::Tcp, vec![4096])).unwrap();
    println!("{:?}", legs[0]);
    assert_eq!(legs[0].delivered, legs[0].sent);
}

#[test]
fn latency_reflects_injected_delay() {
    let s = short(BenchTransport::Inproc, vec![256])
        .with_count(1000)
        .with_faults(FaultProfile::default().with_delay(Duration::from_millis(5), Duration::from_millis(5)));
    let leg = &run_latency(&s).unwrap()[0];
    println!("{:?}", leg);
    assert_eq!(leg.delivered, 1000);
    assert!((5_000_000..=6_000_000).contains(&leg.row.p50_latency), "p50 {}", leg.row.p50_latency);
}

#[test]
fn reliability_leg_delivers_everything() {
    let s = short(BenchTransport::Inproc, vec![8])
        .with_count(2000)
        .with_qos(loopback_reliable_qos())
        .with_faults(FaultProfile::lossy(0.2, 3).with_duplicates(0.05));
    let r = run_reliability(&s).unwrap();
    println!("{r:?}");
    assert_eq!((r.delivered, r.unique, r.duplicates, r.failed), (2000, 2000, 0, 0));
    assert!(r.in_order);
}
