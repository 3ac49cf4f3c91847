//! CSV output for latency logs and benchmark summaries.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::LatencySample;

/// Writes `t_send_ns,t_receive_ns,latency_ns` rows.
pub fn write_latency_csv<W: Write>(out: W, samples: &[LatencySample]) -> csv::Result<()> {
    write_rows(out, &[], samples)
}

pub fn save_latency_csv(path: impl AsRef<Path>, samples: &[LatencySample]) -> csv::Result<()> {
    write_latency_csv(std::fs::File::create(path)?, samples)
}

/// Serializes `rows` with a header row, preceded by `# `-prefixed comment
/// lines.
pub fn write_rows<W: Write, T: Serialize>(mut out: W, comments: &[String], rows: &[T]) -> csv::Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
