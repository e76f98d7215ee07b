//! Multi-channel conformity weighting.
//!
//! Three cosine channels score each (user, position) interaction:
//! - α: item embedding on the full transition graph vs. on the graph with
//!   the user's transitions removed,
//! - β: mean of the in-sequence neighbors vs. mean of the outer neighbors,
//! - γ: item embedding vs. mean of the outer neighbors.
//!
//! The channel mean goes through sigmoid, batch min-max scaling and a
//! rescale to mean `μ_c`. The KL term pulls the weights toward samples from
//! `N(μ_c, σ)`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::PAD;
use crate::error::{Error, Result};
use crate::graph_encoder::perturbed_operator_rows;
use crate::graphs::{PerturbationView, SparseGraph};
use crate::sparse::Csr;
use crate::tape::{Mat, Tape, Var};

pub const KL_EPS: f64 = 1e-8;

/// Counts channel evaluations that hit a zero vector or an empty
/// neighborhood and were defined as 0.
#[derive(Debug, Default)]
pub struct DegenerateCounter(AtomicUsize);

impl DegenerateCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>, counter: &DegenerateCounter) -> f64 {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        counter.bump();
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

fn mean_rows(table: &Mat, rows: &[usize]) -> Option<ndarray::Array1<f64>> {
    if rows.is_empty() {
        return None;
    }
    let mut acc = ndarray::Array1::<f64>::zeros(table.ncols());
    for &r in rows {
        acc += &table.row(r);
    }
    Some(acc / rows.len() as f64)
}

pub fn channel_alpha(x_v: ArrayView1<f64>, x_v_perturbed: ArrayView1<f64>, counter: &DegenerateCounter) -> f64 {
    cosine(x_v, x_v_perturbed, counter)
}

/// In-sequence neighbors of `position`: the items directly before and after it.
pub fn inner_neighbors(sequence: &[usize], position: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(2);
    if position > 0 && sequence[position - 1] != PAD {
        out.push(sequence[position - 1]);
    }
    if position + 1 < sequence.len() && sequence[position + 1] != PAD {
        out.push(sequence[position + 1]);
    }
    out
}

/// `cos(mean X[N_v], mean X[O_v])` with `X` the transition-graph embeddings.
pub fn channel_beta(
    sequence: &[usize],
    position: usize,
    transition_embeddings: &Mat,
    view: &PerturbationView<'_>,
    counter: &DegenerateCounter,
) -> f64 {
    let inner = inner_neighbors(sequence, position);
    let outer = view.outer_neighbors(sequence[position]);
    match (mean_rows(transition_embeddings, &inner), mean_rows(transition_embeddings, &outer)) {
        (Some(a), Some(b)) => cosine(a.view(), b.view(), counter),
        _ => {
            counter.bump();
            0.0
        }
    }
}

/// `cos(x_v, mean X[O_v])`; `None` outer mean means an empty neighborhood.
pub fn channel_gamma(x_v: ArrayView1<f64>, outer_mean: Option<ArrayView1<f64>>, counter: &DegenerateCounter) -> f64 {
    match outer_mean {
        Some(m) => cosine(x_v, m, counter),
        None => {
            counter.bump();
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformityEntry {
    pub user_id: usize,
    pub position: usize,
    pub raw: [f64; 3],
    pub omega: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConformityWeights {
    pub entries: Vec<ConformityEntry>,
}

impl ConformityWeights {
    pub fn omegas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.omega).collect()
    }

    pub fn psis(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.psi).collect()
    }

    pub fn mean_omega(&self) -> f64 {
        self.entries.iter().map(|e| e.omega).sum::<f64>() / self.entries.len().max(1) as f64
    }

    /// Diagnostic CSV `user,position,omega_alpha,omega_beta,omega_gamma,omega_final`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("user,position,omega_alpha,omega_beta,omega_gamma,omega_final\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.user_id, e.position, e.raw[0], e.raw[1], e.raw[2], e.omega
            ));
        }
        out
    }
}

/// Channel mean → sigmoid → batch min-max → rescale to mean `μ_c`, on the
/// tape. An all-equal batch maps to the constant 0.5 before the rescale.
/// Returns `(ω, ψ)` columns with `ψ = clip(1 − ω, 0, 1)`.
pub fn transform_on_tape(tape: &mut Tape, channel_mean: Var, mu_c: f64) -> (Var, Var) {
    let squashed = tape.sigmoid(channel_mean);
    let values = tape.value(squashed);
    let lo_v = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_v = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let omega = if hi_v > lo_v {
        let lo = tape.min_all(squashed);
        let hi = tape.max_all(squashed);
        let span = tape.sub_scalar(hi, lo);
        let shifted = tape.sub_scalar(squashed, lo);
        let scaled = tape.div_scalar(shifted, span);
        let mean = tape.mean(scaled);
        let unit = tape.div_scalar(scaled, mean);
        tape.scale(unit, mu_c)
    } else {
        let n = values.nrows();
        tape.leaf(Array2::from_elem((n, 1), mu_c))
    };
    let complement = tape.affine(omega, -1.0, 1.0);
    let psi = tape.clamp(complement, 0.0, 1.0);
    (omega, psi)
}

/// Value-level mixing of raw `(ω^α, ω^β, ω^γ)` triples.
pub fn mix_and_transform(raw: &[[f64; 3]], mu_c: f64) -> Result<Vec<(f64, f64)>> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("empty conformity batch".into()));
    }
    if !(mu_c > 0.0 && mu_c < 1.0) {
        return Err(Error::InvalidArgument(format!("mu_c must lie in (0,1), got {mu_c}")));
    }
    let means = Array2::from_shape_vec((raw.len(), 1), raw.iter().map(|r| (r[0] + r[1] + r[2]) / 3.0).collect())
        .expect("column shape");
    let mut tape = Tape::new();
    let m = tape.leaf(means);
    let (omega, psi) = transform_on_tape(&mut tape, m, mu_c);
    Ok(tape
        .value(omega)
        .iter()
        .zip(tape.value(psi).iter())
        .map(|(&w, &p)| (w, p))
        .collect())
}

/// Draw `φ_i ~ N(μ_c, σ)` clamped to `[ε, 1]`.
pub fn sample_targets(n: usize, mu_c: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let normal = Normal::new(mu_c, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((0..n).map(|_| normal.sample(rng).clamp(KL_EPS, 1.0)).collect())
}

/// `Σ φ_i log(φ_i / ω_i)` against freshly sampled targets.
pub fn kl_regularizer(omegas: &[f64], mu_c: f64, sigma: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = sample_targets(omegas.len(), mu_c, sigma, &mut rng)?;
    Ok(kl_with_targets(omegas, &phi))
}

pub fn kl_with_targets(omegas: &[f64], phi: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let w = tape.leaf(Array2::from_shape_vec((omegas.len(), 1), omegas.to_vec()).expect("column"));
    let kl = tape.kl_to_target(w, phi.to_vec(), KL_EPS);
    tape.scalar_value(kl)
}

/// One anchor in the batch: the user, their graph-building sequence, the
/// batch input sequence and a position within it.
#[derive(Debug, Clone, Copy)]
pub struct Anchor<'a> {
    pub user_id: usize,
    pub graph_sequence: &'a [usize],
    pub input: &'a [usize],
    pub position: usize,
}

/// Constant sparse operators that turn table rows into the per-anchor
/// channel inputs.
#[derive(Debug, Clone)]
pub struct ChannelOperators {
    /// Rows of the perturbed propagation operator (applied to the base table).
    pub perturbed: Arc<Csr>,
    /// Inner-neighbor averaging (applied to transition embeddings).
    pub inner_mean: Arc<Csr>,
    /// Outer-neighbor averaging (applied to transition embeddings).
    pub outer_mean: Arc<Csr>,
    pub degenerate_inner: usize,
    pub degenerate_outer: usize,
}

fn averaging_row(items: &[usize]) -> Vec<(usize, f64)> {
    let w = 1.0 / items.len().max(1) as f64;
    items.iter().map(|&i| (i, w)).collect()
}

pub fn channel_operators(anchors: &[Anchor<'_>], transition_raw: &SparseGraph, layers: usize) -> Result<ChannelOperators> {
    let cols = transition_raw.node_count();
    // group anchors by user so each perturbation view is built once
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        match groups.last_mut() {
            Some((start, end)) if anchors[*start].user_id == a.user_id && *end == i => *end = i + 1,
            _ => groups.push((i, i + 1)),
        }
    }
    let per_group: Vec<Result<Vec<(Vec<(usize, f64)>, Vec<(usize, f64)>, Vec<(usize, f64)>)>>> = groups
        .par_iter()
        .map(|&(start, end)| {
            let first = &anchors[start];
            let view = PerturbationView::new(transition_raw, first.graph_sequence)?;
            let nodes: Vec<usize> = anchors[start..end].iter().map(|a| a.input[a.position]).collect();
            let rows = perturbed_operator_rows(&view, &nodes, layers);
            Ok(anchors[start..end]
                .iter()
                .zip(rows)
                .map(|(a, prow)| {
                    let inner = inner_neighbors(a.input, a.position);
                    let outer = view.outer_neighbors(a.input[a.position]);
                    (prow, averaging_row(&inner), averaging_row(&outer))
                })
                .collect())
        })
        .collect();
    let mut perturbed = Vec::with_capacity(anchors.len());
    let mut inner = Vec::with_capacity(anchors.len());
    let mut outer = Vec::with_capacity(anchors.len());
    for group in per_group {
        for (p, i, o) in group? {
            perturbed.push(p);
            inner.push(i);
            outer.push(o);
        }
    }
    let degenerate_inner = inner.iter().filter(|r| r.is_empty()).count();
    let degenerate_outer = outer.iter().filter(|r| r.is_empty()).count();
    Ok(ChannelOperators {
        perturbed: Arc::new(Csr::from_rows(cols, perturbed)),
        inner_mean: Arc::new(Csr::from_rows(cols, inner)),
        outer_mean: Arc::new(Csr::from_rows(cols, outer)),
        degenerate_inner,
        degenerate_outer,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelVars {
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    pub mean: Var,
}

/// Build the three channels on the tape. `anchor_x` holds `x_v` rows for the
/// anchors, `transition` the full transition embeddings and `graph_base` the
/// table the graph encoders propagate.
pub fn channels_on_tape(
    tape: &mut Tape,
    ops: &ChannelOperators,
    anchor_x: Var,
    transition: Var,
    graph_base: Var,
) -> ChannelVars {
    let x_norm = tape.row_normalize(anchor_x);
    let perturbed = tape.spmm(ops.perturbed.clone(), graph_base);
    let perturbed = tape.row_normalize(perturbed);
    let inner = tape.spmm(ops.inner_mean.clone(), transition);
    let inner = tape.row_normalize(inner);
    let outer = tape.spmm(ops.outer_mean.clone(), transition);
    let outer = tape.row_normalize(outer);
    let alpha = tape.row_dot(x_norm, perturbed);
    let beta = tape.row_dot(inner, outer);
    let gamma = tape.row_dot(x_norm, outer);
    let s = tape.add(alpha, beta);
    let s = tape.add(s, gamma);
    let mean = tape.scale(s, 1.0 / 3.0);
    ChannelVars { alpha, beta, gamma, mean }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_encoder::propagate_values;
    use crate::graphs::{build_transition_graph, normalize, perturb_for_user};
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn alpha_examples() {
        let c = DegenerateCounter::default();
        let x = array![0.3, -1.2, 2.0];
        assert!((channel_alpha(x.view(), x.view(), &c) - 1.0).abs() < 1e-12);
        let neg = -&x;
        assert!((channel_alpha(x.view(), neg.view(), &c) + 1.0).abs() < 1e-12);
        let (a, b) = (array![1.0, 0.0], array![1.0, 1.0]);
        assert!((channel_alpha(a.view(), b.view(), &c) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(c.count(), 0);
        let zero = array![0.0, 0.0];
        assert_eq!(channel_alpha(a.view(), zero.view(), &c), 0.0);
        assert_eq!(c.count(), 1);
    }

    #[test]
    fn gamma_examples() {
        let c = DegenerateCounter::default();
        let x = array![0.5, 0.1];
        assert!((channel_gamma(x.view(), Some(x.view()), &c) - 1.0).abs() < 1e-12);
        assert_eq!(channel_gamma(x.view(), None, &c), 0.0);
        assert_eq!(c.count(), 1);
    }

    #[test]
    fn beta_on_toy_graph_matches_brute_force() {
        // users: s0 = (1,2,3), s1 = (2,3), s2 = (3,1)
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 3], vec![2, 3], vec![3, 1]];
        let g = build_transition_graph(seqs.iter().map(|s| s.as_slice()), 4).unwrap();
        let x = array![[0.0, 0.0], [1.0, 0.2], [-0.3, 0.8], [0.5, 0.5]];
        let view = PerturbationView::new(&g, &seqs[0]).unwrap();
        let c = DegenerateCounter::default();
        // position 1 (item 2): inner {1, 3}; outer: item 2's edges without s0's
        // pairs (1,2),(2,3): (2,3) still has s1's contribution -> {3}
        let beta = channel_beta(&seqs[0], 1, &x, &view, &c);
        let inner = (&x.row(1) + &x.row(3)) / 2.0;
        let outer = x.row(3).to_owned();
        let expected = inner.dot(&outer) / (inner.dot(&inner).sqrt() * outer.dot(&outer).sqrt());
        assert!((beta - expected).abs() < 1e-12);
    }

    #[test]
    fn beta_identical_sets_and_orthogonal_vectors() {
        // s0 = (2,1,2)? keep distinct: s0 = (1,2), s1 = (1,2): outer of 2 in s0 = {1} = inner
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2], vec![1, 2]];
        let g = build_transition_graph(seqs.iter().map(|s| s.as_slice()), 4).unwrap();
        let view = PerturbationView::new(&g, &seqs[0]).unwrap();
        let c = DegenerateCounter::default();
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        assert!((channel_beta(&seqs[0], 1, &x, &view, &c) - 1.0).abs() < 1e-12);

        // inner {1}, outer {3}, orthogonal embeddings
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2], vec![2, 3]];
        let g = build_transition_graph(seqs.iter().map(|s| s.as_slice()), 4).unwrap();
        let view = PerturbationView::new(&g, &seqs[0]).unwrap();
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.3, 0.3], [0.0, 2.0]];
        assert!(channel_beta(&seqs[0], 1, &x, &view, &c).abs() < 1e-12);

        // sole contributor: empty outer set, degenerate
        let before = c.count();
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2]];
        let g = build_transition_graph(seqs.iter().map(|s| s.as_slice()), 4).unwrap();
        let view = PerturbationView::new(&g, &seqs[0]).unwrap();
        assert_eq!(channel_beta(&seqs[0], 0, &x, &view, &c), 0.0);
        assert_eq!(c.count(), before + 1);
    }

    #[test]
    fn mix_example() {
        let out = mix_and_transform(&[[0.0; 3], [1.0; 3]], 0.5).unwrap();
        assert!(out[0].0.abs() < 1e-12);
        assert!((out[1].0 - 1.0).abs() < 1e-12);
        assert!((out[0].1 - 1.0).abs() < 1e-12);
        assert!(out[1].1.abs() < 1e-12);
    }

    #[test]
    fn all_equal_batch_maps_to_mu() {
        let out = mix_and_transform(&[[0.3, 0.1, 0.2]; 7], 0.4).unwrap();
        assert!(out.iter().all(|&(w, p)| (w - 0.4).abs() < 1e-15 && (p - 0.6).abs() < 1e-15));
    }

    #[test]
    fn large_batch_mean_is_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<[f64; 3]> = (0..1000).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let out = mix_and_transform(&raw, 0.6).unwrap();
        let mean = out.iter().map(|o| o.0).sum::<f64>() / 1000.0;
        assert!((mean - 0.6).abs() < 1e-12);
        for &(w, p) in &out {
            assert!(w >= 0.0);
            assert!((0.0..=1.0).contains(&p));
            if w <= 1.0 {
                assert!((w + p - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mix_rejects_bad_input() {
        assert!(mix_and_transform(&[], 0.5).is_err());
        assert!(mix_and_transform(&[[0.0; 3]], 1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        assert!(kl_with_targets(&[0.3, 0.7], &[0.3, 0.7]).abs() < 1e-15);
        assert!((kl_with_targets(&[0.25], &[0.5]) - 0.5 * 2f64.ln()).abs() < 1e-12);
        let w = [0.2, 0.4, 0.9];
        assert_eq!(kl_regularizer(&w, 0.5, 0.1, 7).unwrap(), kl_regularizer(&w, 0.5, 0.1, 7).unwrap());
        assert!(kl_regularizer(&w, 0.5, 0.0, 7).is_err());
    }

    #[test]
    fn operators_reproduce_value_channels() {
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4], vec![2, 3, 5], vec![5, 1, 2], vec![4, 5, 3]];
        let g = build_transition_graph(seqs.iter().map(|s| s.as_slice()), 6).unwrap();
        let norm = normalize(&g).unwrap();
        let base = Array2::from_shape_fn((6, 3), |(r, c)| if r == 0 { 0.0 } else { ((r * 5 + c) as f64 * 0.7).sin() });
        let x = propagate_values(&norm, &base, 2).unwrap().final_embeddings;
        let anchors: Vec<Anchor> = seqs
            .iter()
            .enumerate()
            .flat_map(|(u, s)| (0..s.len()).map(move |p| Anchor { user_id: u, graph_sequence: s, input: s, position: p }))
            .collect();
        let ops = channel_operators(&anchors, &g, 2).unwrap();
        let mut tape = Tape::new();
        let bv = tape.leaf(base.clone());
        let xv = tape.leaf(x.clone());
        let items: Vec<usize> = anchors.iter().map(|a| a.input[a.position]).collect();
        let ax = tape.gather_rows(xv, items);
        let ch = channels_on_tape(&mut tape, &ops, ax, xv, bv);
        let c = DegenerateCounter::default();
        for (i, a) in anchors.iter().enumerate() {
            let item = a.input[a.position];
            let p = perturb_for_user(&g, a.user_id, a.graph_sequence).unwrap();
            let xp = propagate_values(&p.normalized, &base, 2).unwrap().final_embeddings;
            let alpha = channel_alpha(x.row(item), xp.row(item), &c);
            let view = PerturbationView::new(&g, a.graph_sequence).unwrap();
            let beta = channel_beta(a.input, a.position, &x, &view, &c);
            let outer = mean_rows(&x, &view.outer_neighbors(item));
            let gamma = channel_gamma(x.row(item), outer.as_ref().map(|o| o.view()), &c);
            assert!((tape.value(ch.alpha)[[i, 0]] - alpha).abs() < 1e-12);
            assert!((tape.value(ch.beta)[[i, 0]] - beta).abs() < 1e-12);
            assert!((tape.value(ch.gamma)[[i, 0]] - gamma).abs() < 1e-12);
        }
    }
}
