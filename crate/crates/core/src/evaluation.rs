//! Leave-one-out ranking metrics, cold-start and item-sparsity slices, and
//! embedding exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use log::warn;
use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Example, SplitDataset, PAD};
use crate::error::{Error, Result};
use crate::model::Snapshot;
use crate::tape::Mat;

pub const CUTOFFS: [usize; 3] = [1, 5, 10];
pub const COLD_START_THRESHOLD: usize = 20;
pub const SPARSITY_GROUPS: usize = 5;

/// 1-based rank of column `target` in `scores`. Ties go to the lower column.
pub fn rank_of(scores: ArrayView1<f64>, target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Ranks of each row's target token; score column `j` is token `j + 1`.
pub fn ranks(scores: &Mat, targets: &[usize]) -> Result<Vec<usize>> {
    if scores.nrows() != targets.len() {
        return Err(Error::InvalidArgument("one target per score row required".into()));
    }
    let catalog = scores.ncols();
    if let Some(&bad) = targets.iter().find(|&&t| t == PAD || t > catalog) {
        return Err(Error::Contract(format!("target {bad} is not in the catalog of {catalog} items")));
    }
    Ok(scores
        .outer_iter()
        .into_par_iter()
        .zip(targets.par_iter())
        .map(|(row, &t)| rank_of(row, t - 1))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub user_count: usize,
    #[serde(rename = "HR")]
    pub hr: BTreeMap<usize, f64>,
    #[serde(rename = "NDCG")]
    pub ndcg: BTreeMap<usize, f64>,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize], cutoffs: &[usize]) -> Self {
        let n = ranks.len();
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in cutoffs {
            let (mut hits, mut gain) = (0usize, 0.0);
            for &r in ranks {
                if r <= k {
                    hits += 1;
                    gain += 1.0 / ((r + 1) as f64).log2();
                }
            }
            let denom = n.max(1) as f64;
            hr.insert(k, if n == 0 { 0.0 } else { hits as f64 / denom });
            ndcg.insert(k, if n == 0 { 0.0 } else { gain / denom });
        }
        Metrics { user_count: n, hr, ndcg }
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }
}

pub fn rank_metrics(scores: &Mat, targets: &[usize], cutoffs: &[usize]) -> Result<Metrics> {
    Ok(Metrics::from_ranks(&ranks(scores, targets)?, cutoffs))
}

/// Serialized as `{user_count, HR: {N: v}, NDCG: {N: v}, slices: {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ReportRepr", into = "ReportRepr")]
pub struct MetricReport {
    pub overall: Metrics,
    pub slices: BTreeMap<String, Metrics>,
    /// Per-user ranks in example order, kept for slice recombination.
    pub ranks: Vec<usize>,
    /// Sparsity group (1-based) of each example, same order as `ranks`.
    pub sparsity_group: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ReportRepr {
    user_count: usize,
    #[serde(rename = "HR")]
    hr: BTreeMap<usize, f64>,
    #[serde(rename = "NDCG")]
    ndcg: BTreeMap<usize, f64>,
    slices: BTreeMap<String, Metrics>,
}

impl From<ReportRepr> for MetricReport {
    fn from(r: ReportRepr) -> Self {
        MetricReport {
            overall: Metrics { user_count: r.user_count, hr: r.hr, ndcg: r.ndcg },
            slices: r.slices,
            ranks: Vec::new(),
            sparsity_group: Vec::new(),
        }
    }
}

impl From<MetricReport> for ReportRepr {
    fn from(m: MetricReport) -> Self {
        ReportRepr { user_count: m.overall.user_count, hr: m.overall.hr, ndcg: m.overall.ndcg, slices: m.slices }
    }
}

impl MetricReport {
    /// Metrics over the users whose target falls in any of `groups` (1-based).
    pub fn groups_metrics(&self, groups: &[usize], cutoffs: &[usize]) -> Metrics {
        let subset: Vec<usize> = self
            .ranks
            .iter()
            .zip(&self.sparsity_group)
            .filter(|(_, g)| groups.contains(g))
            .map(|(&r, _)| r)
            .collect();
        Metrics::from_ranks(&subset, cutoffs)
    }
}

/// Indices of examples whose user has fewer than `threshold` interactions.
pub fn cold_start_slice(examples: &[Example], threshold: usize) -> Vec<usize> {
    examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.total_interactions < threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Distinct target items ordered by training count (then id), cut into
/// `groups` contiguous equal-size groups (sizes differ by at most one).
/// Returns the 1-based group of each target. Group 1 holds the rarest items.
pub fn sparsity_groups(train_counts: &[usize], targets: &[usize], groups: usize) -> Result<Vec<usize>> {
    if groups == 0 {
        return Err(Error::InvalidArgument("groups must be >= 1".into()));
    }
    let mut distinct: Vec<usize> = targets.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if let Some(&bad) = distinct.iter().find(|&&t| t >= train_counts.len()) {
        return Err(Error::Contract(format!("target {bad} outside the count table")));
    }
    distinct.sort_by_key(|&t| (train_counts[t], t));
    let g = groups.min(distinct.len()).max(1);
    if g < groups {
        warn!("only {} distinct target items; using {g} sparsity groups instead of {groups}", distinct.len());
    }
    let (base, extra) = (distinct.len() / g, distinct.len() % g);
    let mut group_of = BTreeMap::new();
    let mut start = 0;
    for k in 0..g {
        let size = base + usize::from(k < extra);
        for &item in &distinct[start..start + size] {
            group_of.insert(item, k + 1);
        }
        start += size;
    }
    Ok(targets.iter().map(|t| group_of[t]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Valid,
    Test,
}

pub fn report_from_ranks(
    ranks: Vec<usize>,
    examples: &[Example],
    train_counts: &[usize],
    cold_threshold: usize,
    groups: usize,
) -> Result<MetricReport> {
    let overall = Metrics::from_ranks(&ranks, &CUTOFFS);
    let mut slices = BTreeMap::new();
    let cold: Vec<usize> = cold_start_slice(examples, cold_threshold).into_iter().map(|i| ranks[i]).collect();
    slices.insert("cold_start".to_string(), Metrics::from_ranks(&cold, &CUTOFFS));
    let targets: Vec<usize> = examples.iter().map(|e| e.target).collect();
    let group = if examples.is_empty() { Vec::new() } else { sparsity_groups(train_counts, &targets, groups)? };
    let used = group.iter().copied().max().unwrap_or(0);
    for g in 1..=used {
        let subset: Vec<usize> = ranks.iter().zip(&group).filter(|(_, &k)| k == g).map(|(&r, _)| r).collect();
        slices.insert(format!("sparsity_group_{g}"), Metrics::from_ranks(&subset, &CUTOFFS));
    }
    Ok(MetricReport { overall, slices, ranks, sparsity_group: group })
}

/// Histories and targets for one evaluation stage.
pub fn stage_examples(split: &SplitDataset, stage: Stage) -> &[Example] {
    match stage {
        Stage::Valid => &split.valid,
        Stage::Test => &split.test,
    }
}

pub fn evaluate(snapshot: &Snapshot, split: &SplitDataset, stage: Stage) -> Result<MetricReport> {
    let examples = stage_examples(split, stage);
    let histories: Vec<&[usize]> = examples.iter().map(|e| e.history.as_slice()).collect();
    let targets: Vec<usize> = examples.iter().map(|e| e.target).collect();
    let scores = if examples.is_empty() { Mat::zeros((0, split.catalog_size)) } else { snapshot.score(&histories)? };
    let r = ranks(&scores, &targets)?;
    report_from_ranks(
        r,
        examples,
        &split.train_item_counts(),
        snapshot.config.cold_start_threshold,
        snapshot.config.sparsity_groups,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingView {
    HTable,
    X,
    Z,
    Fused,
}

impl FromStr for EmbeddingView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h_table" => Ok(Self::HTable),
            "x" => Ok(Self::X),
            "z" => Ok(Self::Z),
            "fused" => Ok(Self::Fused),
            other => Err(Error::Config(format!("unknown embedding view {other:?} (expected h_table, x, z or fused)"))),
        }
    }
}

/// `|V| × d` matrix for a view, row `j` = token `j + 1`.
pub fn view_matrix(snapshot: &Snapshot, view: EmbeddingView) -> Mat {
    use ndarray::s;
    match view {
        EmbeddingView::HTable => snapshot.item_table().slice(s![1.., ..]).to_owned(),
        EmbeddingView::X => snapshot.x.slice(s![1.., ..]).to_owned(),
        EmbeddingView::Z => snapshot.z.slice(s![1.., ..]).to_owned(),
        EmbeddingView::Fused => snapshot.fused_items(),
    }
}

/// TSV with a header; first column is the external item id.
pub fn export_embeddings(snapshot: &Snapshot, view: EmbeddingView, item_ids: &[String]) -> Result<String> {
    let m = view_matrix(snapshot, view);
    if item_ids.len() != m.nrows() {
        return Err(Error::InvalidArgument(format!("{} item ids for {} rows", item_ids.len(), m.nrows())));
    }
    let mut out = String::from("item");
    for c in 0..m.ncols() {
        write!(out, "\tdim_{c}").unwrap();
    }
    out.push('\n');
    for (row, id) in m.outer_iter().zip(item_ids) {
        out.push_str(id);
        for v in row {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
