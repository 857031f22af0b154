//! Per-round metrics as CSV.

use std::io::Write;
use std::path::Path;

use crate::netsim::RoundMetrics;
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 10] = [
    "epoch",
    "round",
    "leader_id",
    "committed",
    "block_hash",
    "test_error",
    "t_lgc_ms",
    "t_ge_ms",
    "t_bc_ms",
    "reputation_min",
];

/// Columns that carry wall-clock measurements.
pub const WALL_CLOCK_COLUMNS: [&str; 3] = ["t_lgc_ms", "t_ge_ms", "t_bc_ms"];

fn row(m: &RoundMetrics) -> [String; 10] {
    [
        m.epoch.to_string(),
        m.round.to_string(),
        m.leader.map(|id| id.to_string()).unwrap_or_default(),
        m.committed.to_string(),
        m.block_hash.map(|h| h.to_hex()).unwrap_or_default(),
        m.test_error.map(|e| e.to_string()).unwrap_or_default(),
        m.t_lgc_ms.to_string(),
        m.t_ge_ms.to_string(),
        m.t_bc_ms.to_string(),
        m.reputation_min.to_string(),
    ]
}

/// Writes the header and one row per round to any writer.
pub fn write_csv<W: Write>(metrics: &[RoundMetrics], out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for m in metrics {
        w.write_record(row(m))?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(metrics: &[RoundMetrics], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(metrics, file).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    })
}
