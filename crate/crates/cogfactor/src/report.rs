//! Report serialization: deterministic CSV/JSON accuracy records plus a
//! separate timing file for wall-clock diagnostics.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::ExperimentReport;
use crate::io::atomic_write;

/// SHA-256 of the compact JSON encoding of `value`, hex encoded.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)
        .map_err(|e| Error::Invalid(format!("unserializable config: {e}")))?;
    let digest = Sha256::digest(&json);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

/// Writes `<stem>.csv` and `<stem>.json` (deterministic given the
/// records) plus `<stem>_timings.csv` (wall-clock, varies run to run).
pub fn write_report(dir: &Path, stem: &str, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let csv_path = dir.join(format!("{stem}.csv"));
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["variant", "target_study", "arm", "train_subjects", "fold_seed", "test_accuracy"])
        .map_err(|e| Error::Invalid(e.to_string()))?;
    for r in &report.records {
        writer
            .write_record([
                r.variant.to_string(),
                r.target_study.clone(),
                r.arm.clone(),
                r.train_subjects.to_string(),
                r.fold_seed.to_string(),
                format!("{:.17}", r.test_accuracy),
            ])
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    atomic_write(&csv_path, &bytes)?;

    crate::io::write_json(&dir.join(format!("{stem}.json")), report)?;

    let timing_path = dir.join(format!("{stem}_timings.csv"));
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["variant", "target_study", "arm", "fold_seed", "seconds"])
        .map_err(|e| Error::Invalid(e.to_string()))?;
    for t in &report.timings {
        writer
            .write_record([
                t.variant.to_string(),
                t.target_study.clone(),
                t.arm.clone(),
                t.fold_seed.to_string(),
                format!("{:.6}", t.seconds),
            ])
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    atomic_write(&timing_path, &bytes)
}
