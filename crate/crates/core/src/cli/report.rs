//! Summaries over certificate record files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{read_record_file, CertificateRecord};
use super::Mode;
use crate::error::{OvcError, Result};

pub const REPORT_FILE: &str = "report.json";

/// Certified accuracy as a step function of radius: `(r, fraction of
/// records that are correct with radius >= r)` at every distinct radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub mode: Mode,
    pub records: usize,
    pub points: Vec<(f64, f64)>,
}

impl AccuracyCurve {
    pub fn at(&self, radius: f64) -> f64 {
        self.points
            .iter()
            .rev()
            .find(|(r, _)| *r >= radius)
            .map(|&(_, acc)| acc)
            .unwrap_or(0.0)
    }
}

/// Radii of one method paired with standard radii on the same (input, prompt).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPairs {
    pub mode: Mode,
    /// `(standard, method)`; abstentions count as radius 0.
    pub pairs: Vec<(f64, f64)>,
    pub mean_abs_diff: f64,
    /// Pairs where the method's radius exceeds the standard one.
    pub exceed_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub mode: Mode,
    pub records: usize,
    pub total_wall_time: f64,
    pub total_encoder_calls: u64,
    /// Standard wall time over this method's, on shared (input, prompt) pairs.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub curves: Vec<AccuracyCurve>,
    pub scatter: Vec<ScatterPairs>,
    pub speedup: Vec<SpeedupRow>,
}

fn radius_or_zero(r: &CertificateRecord) -> f64 {
    r.cert.radius.unwrap_or(0.0)
}

fn curve(mode: Mode, records: &[&CertificateRecord]) -> AccuracyCurve {
    let mut radii: Vec<f64> = records
        .iter()
        .filter(|r| r.is_correct())
        .map(|r| radius_or_zero(r))
        .collect();
    radii.sort_by(|a, b| b.total_cmp(a));
    let n = records.len().max(1) as f64;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, r) in radii.iter().enumerate() {
        let acc = (i + 1) as f64 / n;
        match points.last_mut() {
            Some(last) if last.0 == *r => last.1 = acc,
            _ => points.push((*r, acc)),
        }
    }
    points.reverse();
    AccuracyCurve {
        mode,
        records: records.len(),
        points,
    }
}

type PairKey = (u64, String);

fn key(r: &CertificateRecord) -> PairKey {
    (r.cert.input_id, r.cert.prompt_id.clone())
}

pub fn build_report(records: &[CertificateRecord]) -> Report {
    let mut by_mode: BTreeMap<&'static str, (Mode, Vec<&CertificateRecord>)> = BTreeMap::new();
    for r in records {
        by_mode.entry(r.mode.as_str()).or_insert_with(|| (r.mode, Vec::new())).1.push(r);
    }
    let standard: HashMap<PairKey, &CertificateRecord> = by_mode
        .get("standard")
        .map(|(_, rs)| rs.iter().map(|r| (key(r), *r)).collect())
        .unwrap_or_default();

    let mut curves = Vec::new();
    let mut scatter = Vec::new();
    let mut speedup = Vec::new();
    for (mode, rs) in by_mode.values() {
        curves.push(curve(*mode, rs));
        let shared: Vec<(&CertificateRecord, &CertificateRecord)> = rs
            .iter()
            .filter_map(|r| standard.get(&key(r)).map(|s| (*s, *r)))
            .collect();
        if *mode != Mode::Standard && !shared.is_empty() {
            let pairs: Vec<(f64, f64)> = shared
                .iter()
                .map(|(s, r)| (radius_or_zero(s), radius_or_zero(r)))
                .collect();
            scatter.push(ScatterPairs {
                mode: *mode,
                mean_abs_diff: pairs.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / pairs.len() as f64,
                exceed_count: pairs.iter().filter(|(a, b)| b > a).count(),
                pairs,
            });
        }
        let std_wall: f64 = shared.iter().map(|(s, _)| s.cert.wall_time).sum();
        let own_wall: f64 = shared.iter().map(|(_, r)| r.cert.wall_time).sum();
        speedup.push(SpeedupRow {
            mode: *mode,
            records: rs.len(),
            total_wall_time: rs.iter().map(|r| r.cert.wall_time).sum(),
            total_encoder_calls: rs.iter().map(|r| r.cert.encoder_calls).sum(),
            speedup: (!shared.is_empty() && own_wall > 0.0).then(|| std_wall / own_wall),
        });
    }
    Report {
        curves,
        scatter,
        speedup,
    }
}

impl Report {
    pub fn speedup_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>12} {:>14} {:>9}",
            "mode", "records", "wall (s)", "encoder calls", "speedup"
        );
        for row in &self.speedup {
            let speedup = row.speedup.map_or("-".to_string(), |v| format!("{v:.1}x"));
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>12.3} {:>14} {:>9}",
                row.mode.as_str(),
                row.records,
                row.total_wall_time,
                row.total_encoder_calls,
                speedup
            );
        }
        s
    }
}

/// Reads record files, writes `report.json` into `out`, and returns the report.
pub fn cmd_report(files: &[PathBuf], out: &Path) -> Result<Report> {
    let mut records = Vec::new();
    for f in files {
        records.extend(read_record_file(f)?);
    }
    if records.is_empty() {
        return Err(OvcError::ConfigInvalid("no certificate records in the given files".into()));
    }
    let report = build_report(&records);
    fs::create_dir_all(out)?;
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
