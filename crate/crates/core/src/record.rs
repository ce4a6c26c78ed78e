//! Run records and CSV tables.
//!
//! Wall time and peak memory differ between reruns, so they live in a
//! `*_timing.csv` sidecar; the main table is byte-deterministic.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{GlError, Result};

/// One evaluation cell: (seed, classifier, attack, r).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub dataset: String,
    pub labeled: usize,
    pub seed: u64,
    pub classifier: String,
    pub attack: String,
    pub r: f64,
    pub accuracy: f64,
    /// `sup |u_clean - u_attacked|` over query nodes (GL family only).
    pub u_deviation: Option<f64>,
    pub solver_iterations: Option<usize>,
    #[serde(skip)]
    pub wall_time_s: f64,
    #[serde(skip)]
    pub peak_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingRow {
    config_hash: String,
    seed: u64,
    classifier: String,
    attack: String,
    r: f64,
    wall_time_s: f64,
    peak_bytes: u64,
}

pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| GlError::Io(std::io::Error::other(e.to_string())))?;
    }
    let bytes = w.into_inner().map_err(|e| GlError::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| GlError::Io(std::io::Error::other(e.to_string())))
}

pub fn rows_from_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(|e| GlError::Load(e.to_string()))).collect()
}

pub fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    fs::write(path, rows_to_csv(rows)?)?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    rows_from_csv(&fs::read_to_string(path)?)
}

fn timing_rows(records: &[RunRecord]) -> Vec<TimingRow> {
    records
        .iter()
        .map(|r| TimingRow {
            config_hash: r.config_hash.clone(),
            seed: r.seed,
            classifier: r.classifier.clone(),
            attack: r.attack.clone(),
            r: r.r,
            wall_time_s: r.wall_time_s,
            peak_bytes: r.peak_bytes,
        })
        .collect()
}

/// Writes `<stem>.csv` and `<stem>_timing.csv` into `dir`.
pub fn write_records(dir: impl AsRef<Path>, stem: &str, records: &[RunRecord]) -> Result<()> {
    let dir = dir.as_ref();
    write_rows(dir.join(format!("{stem}.csv")), records)?;
    write_rows(dir.join(format!("{stem}_timing.csv")), &timing_rows(records))
}

/// Reads both files back; timing fields are restored when the sidecar exists.
pub fn read_records(dir: impl AsRef<Path>, stem: &str) -> Result<Vec<RunRecord>> {
    let dir = dir.as_ref();
    let mut records: Vec<RunRecord> = read_rows(dir.join(format!("{stem}.csv")))?;
    let side = dir.join(format!("{stem}_timing.csv"));
    if side.exists() {
        let timing: Vec<TimingRow> = read_rows(side)?;
        if timing.len() != records.len() {
            return Err(GlError::Load("timing sidecar row count differs from the record table".into()));
        }
        for (rec, t) in records.iter_mut().zip(timing) {
            rec.wall_time_s = t.wall_time_s;
            rec.peak_bytes = t.peak_bytes;
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<RunRecord> {
        vec![
            RunRecord {
                config_hash: "abc".into(),
                dataset: "halfmoon".into(),
                labeled: 400,
                seed: 3,
                classifier: "GL".into(),
                attack: "direct".into(),
                r: 0.1 + 0.2,
                accuracy: 0.96612345678901,
                u_deviation: Some(1e-17),
                solver_iterations: Some(31),
                wall_time_s: 0.25,
                peak_bytes: 1 << 20,
            },
            RunRecord {
                classifier: "kNN".into(),
                u_deviation: None,
                solver_iterations: None,
                ..sample_one()
            },
        ]
    }

    fn sample_one() -> RunRecord {
        RunRecord {
            config_hash: "abc".into(),
            dataset: "halfmoon".into(),
            labeled: 400,
            seed: 4,
            classifier: "GL".into(),
            attack: "none".into(),
            r: 0.0,
            accuracy: 1.0 / 3.0,
            u_deviation: None,
            solver_iterations: None,
            wall_time_s: 0.0,
            peak_bytes: 0,
        }
    }

    #[test]
    fn round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let recs = sample();
        write_records(dir.path(), "runs", &recs).unwrap();
        assert_eq!(read_records(dir.path(), "runs").unwrap(), recs);
        let main = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert!(!main.contains("wall_time"));
    }
}
