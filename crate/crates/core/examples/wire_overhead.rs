//! Wire overhead and bandwidth of frames across payload sizes.

use std::time::Duration;

use metaros::envelope::{Frame, FrameKind, PayloadType};
use metaros::metrics::{compute_bandwidth, compute_wire_overhead, frame_bits};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{:>9} {:>9} {:>10} {:>16}", "payload", "frame", "overhead", "1k msg/s bit/s");
    for size in [1usize, 100, 256, 4096, 65_536, 1_048_576] {
        let f = Frame::new(FrameKind::Data, "chatter").with_payload(PayloadType::Bytes, vec![0u8; size]);
        let r = compute_wire_overhead(&f)?;
        let (num, den) = r.exact();
        let bw = compute_bandwidth(frame_bits(std::iter::repeat_n(f.encoded_len(), 1000)), Duration::from_secs(1))?;
        println!("{size:>9} {:>9} {:>10.6} {:>16} ({num}/{den})", r.total_size, r.overhead(), bw.rate);
    }
    Ok(())
}
