//! Report serialization: stable JSON schemas with fixed-precision numbers
//! and Table-style CSV export, plus atomic file writes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TempNormError;
use crate::eval::{EnrollmentRow, SweepRow};

/// Rounds to 6 decimal places so serialized reports diff byte-stably.
pub fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn round6_opt(v: Option<f64>) -> Option<f64> {
    v.map(round6)
}

/// A half-life sweep report: the resolved configuration echoed back, plus
/// one row per half-life.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: serde_json::Value,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn new(config: serde_json::Value, mut rows: Vec<SweepRow>) -> Self {
        for row in &mut rows {
            row.uar_mean = round6_opt(row.uar_mean);
            row.uar_std = round6_opt(row.uar_std);
        }
        SweepReport { config, rows }
    }

    /// CSV mirror of the sweep table, one row per half-life.
    pub fn to_csv(&self) -> Result<String, TempNormError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "half_life",
            "n_subjects",
            "typical",
            "typical_flagged",
            "unused",
            "unused_flagged",
            "anomaly",
            "anomaly_flagged",
            "uar_mean",
            "uar_std",
        ])?;
        for row in &self.rows {
            let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
            w.write_record([
                row.half_life.to_string(),
                row.n_subjects.to_string(),
                row.counts.typical.to_string(),
                row.counts.typical_flagged.to_string(),
                row.counts.unused.to_string(),
                row.counts.unused_flagged.to_string(),
                row.counts.anomaly.to_string(),
                row.counts.anomaly_flagged.to_string(),
                fmt(row.uar_mean),
                fmt(row.uar_std),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| {
            TempNormError::InvalidInput(format!("csv buffer error: {e}"))
        })?;
        String::from_utf8(bytes)
            .map_err(|e| TempNormError::InvalidInput(format!("non-utf8 csv: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnrollmentReport {
    pub config: serde_json::Value,
    pub rows: Vec<EnrollmentRow>,
}

impl EnrollmentReport {
    pub fn new(config: serde_json::Value, mut rows: Vec<EnrollmentRow>) -> Self {
        for row in &mut rows {
            row.uar_mean = round6_opt(row.uar_mean);
        }
        EnrollmentReport { config, rows }
    }
}

/// Writes bytes atomically: a temp file in the target directory is renamed
/// over the destination once fully written.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), TempNormError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| TempNormError::InvalidParameter(format!("bad output path {path:?}")))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::RegionCounts;
    use crate::norm::HalfLife;

    #[test]
    fn rounding_is_stable() {
        assert_eq!(round6(0.12345649), 0.123456);
        assert_eq!(round6(0.1234565), 0.123457);
    }

    #[test]
    fn sweep_csv_has_one_row_per_half_life() {
        let rows = vec![
            SweepRow {
                half_life: HalfLife::Finite(16.0),
                n_subjects: 3,
                counts: RegionCounts::default(),
                uar_mean: Some(0.931234567),
                uar_std: Some(0.04),
            },
            SweepRow {
                half_life: HalfLife::Infinite,
                n_subjects: 0,
                counts: RegionCounts::default(),
                uar_mean: None,
                uar_std: None,
            },
        ];
        let report = SweepReport::new(serde_json::json!({"seed": 7}), rows);
        let csv = report.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("16,3,"));
        assert!(lines[2].starts_with("inf,0,"));
        assert_eq!(report.rows[0].uar_mean, Some(0.931235));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
