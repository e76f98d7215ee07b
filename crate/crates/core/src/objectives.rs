//! Contrastive losses, attentive view fusion, next-item scoring and the
//! joint objective.

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::PAD;
use crate::error::{Error, Result};
use crate::tape::{Mat, Tape, Var};

pub const FUSION_A: &str = "fusion.a";
pub const FUSION_W: &str = "fusion.w_a";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    #[default]
    FullCatalog,
    InBatch,
}

impl FromStr for Negatives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_catalog" => Ok(Self::FullCatalog),
            "in_batch" => Ok(Self::InBatch),
            other => Err(Error::Config(format!("unknown negatives mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Negatives {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FullCatalog => "full_catalog",
            Self::InBatch => "in_batch",
        })
    }
}

/// Candidate rows and positive column indices for a contrastive term.
/// `table` rows are token ids (row 0 is the pad).
fn candidate_set(items: &[usize], catalog_size: usize, negatives: Negatives) -> (Vec<usize>, Vec<usize>) {
    match negatives {
        Negatives::FullCatalog => ((1..=catalog_size).collect(), items.iter().map(|&i| i - 1).collect()),
        Negatives::InBatch => {
            let mut distinct: Vec<usize> = items.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            let index: BTreeMap<usize, usize> = distinct.iter().enumerate().map(|(k, &i)| (i, k)).collect();
            let positives = items.iter().map(|i| index[i]).collect();
            (distinct, positives)
        }
    }
}

/// Weighted cosine InfoNCE on the tape. `anchors` has one row per anchor,
/// `items[i]` is the positive token of anchor `i`, looked up in `table`.
pub fn contrastive_on_tape(
    tape: &mut Tape,
    anchors: Var,
    table: Var,
    items: &[usize],
    weights: Var,
    tau: f64,
    negatives: Negatives,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if items.is_empty() {
        return Ok(tape.constant_scalar(0.0));
    }
    if let Some(&bad) = items.iter().find(|&&i| i == PAD) {
        return Err(Error::Contract(format!("contrastive positive {bad} is the pad token")));
    }
    let catalog_size = tape.value(table).nrows() - 1;
    let (rows, positives) = candidate_set(items, catalog_size, negatives);
    let a = tape.row_normalize(anchors);
    let normalized = tape.row_normalize(table);
    let c = tape.gather_rows(normalized, rows);
    Ok(tape.weighted_info_nce(a, c, weights, positives, tau))
}

fn column(values: &[f64]) -> Mat {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

fn contrastive_values(anchors: &Mat, table: &Mat, items: &[usize], weights: &[f64], tau: f64, negatives: Negatives) -> Result<f64> {
    if anchors.nrows() != items.len() || weights.len() != items.len() {
        return Err(Error::InvalidArgument("anchors, items and weights must align".into()));
    }
    let mut tape = Tape::new();
    let a = tape.leaf(anchors.clone());
    let t = tape.leaf(table.clone());
    let w = tape.leaf(column(weights));
    let loss = contrastive_on_tape(&mut tape, a, t, items, w, tau, negatives)?;
    Ok(tape.scalar_value(loss))
}

/// User-dimension term: anchors are hidden states `h` at each valid
/// position, positives are the transition embeddings of the items there.
pub fn contrastive_user_dim(h: &Mat, x_table: &Mat, items: &[usize], omega: &[f64], tau: f64, negatives: Negatives) -> Result<f64> {
    contrastive_values(h, x_table, items, omega, tau, negatives)
}

/// Item-dimension term: anchors are `x_v`, positives `z_v`.
pub fn contrastive_item_dim(x_table: &Mat, z_table: &Mat, items: &[usize], psi: &[f64], tau: f64, negatives: Negatives) -> Result<f64> {
    let anchors = Array2::from_shape_fn((items.len(), x_table.ncols()), |(r, c)| x_table[[items[r], c]]);
    contrastive_values(&anchors, z_table, items, psi, tau, negatives)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// 1×d row.
    pub a: Mat,
    /// d×d.
    pub w_a: Mat,
}

/// Attentive fusion of three `n×d` views on the tape. Returns the fused rows
/// and the `n×3` weights (columns h, x, z).
pub fn fuse_on_tape(tape: &mut Tape, views: [Var; 3], a: Var, w_a: Var) -> (Var, Var) {
    let u = tape.matmul(a, w_a);
    let scores: Vec<Var> = views.iter().map(|&e| tape.matmul_bt(e, u)).collect();
    let stacked = tape.concat_cols(&scores);
    let weights = tape.softmax_rows(stacked);
    let mut fused = None;
    for (k, &e) in views.iter().enumerate() {
        let w = tape.column(weights, k);
        let part = tape.mul_col(e, w);
        fused = Some(match fused {
            None => part,
            Some(acc) => tape.add(acc, part),
        });
    }
    (fused.expect("three views"), weights)
}

/// Value-level fusion; `h`, `x`, `z` are `n×d` with matching rows.
pub fn fuse_views(h: &Mat, x: &Mat, z: &Mat, params: &FusionParams) -> Result<(Mat, Mat)> {
    let d = h.ncols();
    if x.dim() != h.dim() || z.dim() != h.dim() || params.a.dim() != (1, d) || params.w_a.dim() != (d, d) {
        return Err(Error::InvalidArgument("fusion inputs have mismatched shapes".into()));
    }
    let mut tape = Tape::new();
    let views = [tape.leaf(h.clone()), tape.leaf(x.clone()), tape.leaf(z.clone())];
    let a = tape.leaf(params.a.clone());
    let w = tape.leaf(params.w_a.clone());
    let (p, weights) = fuse_on_tape(&mut tape, views, a, w);
    Ok((tape.value(p).clone(), tape.value(weights).clone()))
}

/// Scores `p · v` for every non-pad item; column `j` is token `j + 1`.
pub fn score_candidates_on_tape(tape: &mut Tape, p_last: Var, item_table: Var) -> Var {
    let rows = tape.value(item_table).nrows();
    let items = tape.gather_rows(item_table, (1..rows).collect());
    tape.matmul_bt(p_last, items)
}

pub fn score_candidates(p_last: &Mat, item_table: &Mat) -> Mat {
    p_last.dot(&item_table.slice(ndarray::s![1.., ..]).t())
}

/// Mean cross entropy; `targets` are tokens, `scores` columns are tokens 1..=V.
pub fn recommendation_loss_on_tape(tape: &mut Tape, scores: Var, targets: &[usize]) -> Result<Var> {
    let cols = tape.value(scores).ncols();
    let mut indices = Vec::with_capacity(targets.len());
    for &t in targets {
        if t == PAD {
            return Err(Error::Contract("recommendation target is the pad token".into()));
        }
        if t > cols {
            return Err(Error::Contract(format!("target {t} outside a catalog of {cols}")));
        }
        indices.push(t - 1);
    }
    Ok(tape.softmax_cross_entropy(scores, indices))
}

pub fn recommendation_loss(scores: &Mat, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(scores.clone());
    let loss = recommendation_loss_on_tape(&mut tape, s, targets)?;
    Ok(tape.scalar_value(loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_rec: f64,
    pub l_u: f64,
    pub l_v: f64,
    pub l_w: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl LossBundle {
    pub fn log_line(&self, step: usize) -> String {
        serde_json::json!({
            "step": step,
            "L_rec": self.l_rec,
            "L_u": self.l_u,
            "L_v": self.l_v,
            "L_w": self.l_w,
            "total": self.total,
        })
        .to_string()
    }
}

pub fn check_lambdas(lambda1: f64, lambda2: f64) -> Result<()> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambdas must be >= 0, got {lambda1}, {lambda2}")));
    }
    Ok(())
}

pub fn total_loss(l_rec: f64, l_u: f64, l_v: f64, l_w: f64, lambda1: f64, lambda2: f64, tau: f64) -> Result<LossBundle> {
    check_lambdas(lambda1, lambda2)?;
    let total = l_rec + lambda1 * (l_u + l_v) + lambda2 * l_w;
    let bundle = LossBundle { l_rec, l_u, l_v, l_w, total, lambda1, lambda2, tau };
    if ![l_rec, l_u, l_v, l_w, total].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            diagnostics: format!("{bundle:?}"),
        });
    }
    Ok(bundle)
}

/// Joint objective on the tape.
pub fn total_on_tape(tape: &mut Tape, l_rec: Var, l_u: Var, l_v: Var, l_w: Var, lambda1: f64, lambda2: f64) -> Var {
    let cl = tape.add(l_u, l_v);
    let cl = tape.scale(cl, lambda1);
    let kl = tape.scale(l_w, lambda2);
    let t = tape.add(l_rec, cl);
    tape.add(t, kl)
}
