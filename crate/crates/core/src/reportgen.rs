//! Run records and ablation tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::MetricReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub ablation: Ablation,
    pub seed: u64,
    pub dataset: String,
    pub metrics: MetricReport,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn new(config: &TrainConfig, dataset: &str, metrics: MetricReport, wall_clock_secs: f64) -> Self {
        RunRecord {
            config_hash: config.config_hash(),
            ablation: config.ablation,
            seed: config.seed,
            dataset: dataset.to_string(),
            metrics,
            wall_clock_secs,
        }
    }
}

pub fn append_record(path: &Path, record: &RunRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: n + 1, message: e.to_string() }))
        .collect()
}

/// Keep the last record for each (dataset, config, ablation, seed).
pub fn dedupe(records: &[RunRecord]) -> Vec<RunRecord> {
    let mut latest: BTreeMap<(String, String, Ablation, u64), RunRecord> = BTreeMap::new();
    for r in records {
        let key = (r.dataset.clone(), r.config_hash.clone(), r.ablation, r.seed);
        if latest.insert(key, r.clone()).is_some() {
            warn!("duplicate run for {} / {} / seed {}; keeping the latest", r.dataset, r.ablation, r.seed);
        }
    }
    latest.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` for a single value.
    pub std: Option<f64>,
}

pub fn seed_aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values to aggregate".into()));
    }
    let n = values.len();
    if values.iter().all(|&v| v == values[0]) {
        return Ok(Aggregate { n, mean: values[0], std: (n > 1).then_some(0.0) });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Ok(Aggregate { n, mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// Per dataset: (HR@1, HR@5).
    pub cells: BTreeMap<String, (Aggregate, Aggregate)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub datasets: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub missing: Vec<Ablation>,
}

pub fn ablation_table(records: &[RunRecord]) -> Result<AblationTable> {
    let records = dedupe(records);
    let mut by_dataset: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *by_dataset.entry(r.dataset.as_str()).or_default() += 1;
    }
    if !by_dataset.values().any(|&n| n >= 2) {
        return Err(Error::InvalidArgument("an ablation table needs at least two runs on one dataset".into()));
    }
    let datasets: Vec<String> = by_dataset.keys().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for ablation in Ablation::ALL {
        let mut cells = BTreeMap::new();
        for ds in &datasets {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| &r.dataset == ds && r.ablation == ablation).collect();
            if runs.is_empty() {
                continue;
            }
            let hashes: BTreeSet<&str> = runs.iter().map(|r| r.config_hash.as_str()).collect();
            if hashes.len() > 1 {
                warn!("{ds} / {ablation}: runs from {} different configs are pooled", hashes.len());
            }
            let hr1: Vec<f64> = runs.iter().map(|r| r.metrics.overall.hr_at(1)).collect();
            let hr5: Vec<f64> = runs.iter().map(|r| r.metrics.overall.hr_at(5)).collect();
            cells.insert(ds.clone(), (seed_aggregate(&hr1)?, seed_aggregate(&hr5)?));
        }
        if cells.is_empty() {
            warn!("no runs for ablation {}; row omitted", ablation.label());
            missing.push(ablation);
        } else {
            rows.push(AblationRow { ablation, cells });
        }
    }
    Ok(AblationTable { datasets, rows, missing })
}

fn fmt_agg(a: &Aggregate) -> String {
    match a.std {
        Some(s) => format!("{:.4} ± {:.4}", a.mean, s),
        None => format!("{:.4}", a.mean),
    }
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for ds in &self.datasets {
            write!(out, ",{ds} HR@1,{ds} HR@1 std,{ds} HR@5,{ds} HR@5 std").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(row.ablation.label());
            for ds in &self.datasets {
                match row.cells.get(ds) {
                    Some((a, b)) => {
                        let std = |x: &Aggregate| x.std.map_or(String::new(), |s| format!("{s:.6}"));
                        write!(out, ",{:.6},{},{:.6},{}", a.mean, std(a), b.mean, std(b)).unwrap();
                    }
                    None => out.push_str(",,,,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Model |");
        for ds in &self.datasets {
            write!(out, " {ds} HR@1 | {ds} HR@5 |").unwrap();
        }
        out.push_str("\n|---|");
        out.push_str(&"---|---|".repeat(self.datasets.len()));
        out.push('\n');
        for row in &self.rows {
            write!(out, "| {} |", row.ablation.label()).unwrap();
            for ds in &self.datasets {
                match row.cells.get(ds) {
                    Some((a, b)) => write!(out, " {} | {} |", fmt_agg(a), fmt_agg(b)).unwrap(),
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Write `ablation.csv` and `ablation.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("ablation.csv", self.to_csv()), ("ablation.md", self.to_markdown())] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
