//! The full model: parameters, immutable graphs, the per-batch training
//! forward pass and frozen-snapshot scoring.

use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Ablation, TrainConfig};
use crate::conformity::{
    channel_operators, channels_on_tape, sample_targets, transform_on_tape, Anchor, ConformityEntry, ConformityWeights,
    KL_EPS,
};
use crate::dataio::{SplitDataset, PAD};
use crate::error::{Error, Result};
use crate::graph_encoder::{operator, propagate};
use crate::graphs::{build_cointeraction_graph, build_transition_graph, normalize, SparseGraph};
use crate::objectives::{
    contrastive_on_tape, fuse_on_tape, recommendation_loss_on_tape, score_candidates, score_candidates_on_tape,
    total_loss, total_on_tape, LossBundle, FUSION_A, FUSION_W,
};
use crate::params::{normal_init, Bound, ParamStore};
use crate::seq_encoder::{embed_input, encode, init_params, DropoutSource, PaddedBatch, INIT_STD, ITEM_EMBEDDINGS};
use crate::sparse::Csr;
use crate::tape::{Mat, Tape, Var};

/// Separate graph base table, present only when `share_graph_base` is off.
pub const GRAPH_EMBEDDINGS: &str = "graph_embeddings";

/// Transition and co-interaction graphs built once from the training
/// histories and never modified afterwards.
#[derive(Debug, Clone)]
pub struct Graphs {
    pub transition_raw: SparseGraph,
    pub transition: Arc<Csr>,
    pub cointeraction_raw: SparseGraph,
    pub cointeraction: Arc<Csr>,
}

impl Graphs {
    pub fn build(split: &SplitDataset, top_k: usize) -> Result<Self> {
        let nodes = split.catalog_size + 1;
        let histories = || split.train_sequences.iter().map(|s| s.items.as_slice());
        let transition_raw = build_transition_graph(histories(), nodes)?;
        let cointeraction_raw = build_cointeraction_graph(histories(), nodes, top_k)?;
        Ok(Graphs {
            transition: operator(&normalize(&transition_raw)?)?,
            cointeraction: operator(&normalize(&cointeraction_raw)?)?,
            transition_raw,
            cointeraction_raw,
        })
    }
}

pub fn init_model_params(config: &TrainConfig, catalog_size: usize, seed: u64) -> ParamStore {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let rows = catalog_size + 1;
    init_params(&mut store, &config.encoder_dims(), rows, &mut rng);
    let d = config.embed_dim;
    store.insert(FUSION_A, normal_init(1, d, INIT_STD, &mut rng));
    store.insert(FUSION_W, normal_init(d, d, INIT_STD, &mut rng));
    if !config.share_graph_base {
        let mut g = normal_init(rows, d, INIT_STD, &mut rng);
        g.row_mut(0).fill(0.0);
        store.insert(GRAPH_EMBEDDINGS, g);
    }
    store
}

/// One training sample: `input` is a prefix of the user's training history
/// (`graph_sequence`) and `target` the item that follows it.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub user_id: usize,
    pub graph_sequence: &'a [usize],
    pub input: &'a [usize],
    pub target: usize,
}

/// Forward-pass switches beyond the config.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub dropout: bool,
    /// Replace ω and ψ by this constant (the adaptive-CL ablation uses 0.5).
    pub weight_override: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub l_rec: Var,
    pub l_u: Var,
    pub l_v: Var,
    pub l_w: Var,
    pub total: Var,
    pub bundle: LossBundle,
    pub conformity: ConformityWeights,
}

fn table_vars(bound: &Bound) -> (Var, Var) {
    let base = bound.var(ITEM_EMBEDDINGS);
    (base, bound.try_var(GRAPH_EMBEDDINGS).unwrap_or(base))
}

/// Build the full training objective for one batch on `tape`.
pub fn forward_batch(
    tape: &mut Tape,
    bound: &Bound,
    config: &TrainConfig,
    graphs: &Graphs,
    samples: &[Sample<'_>],
    rng: &mut ChaCha8Rng,
    options: ForwardOptions,
) -> Result<BatchForward> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let (base, graph_base) = table_vars(bound);
    let x = propagate(tape, &graphs.transition, graph_base, config.gnn_layers)?.final_embeddings;
    let z = propagate(tape, &graphs.cointeraction, graph_base, config.gnn_layers)?.final_embeddings;

    let inputs: Vec<&[usize]> = samples.iter().map(|s| s.input).collect();
    let batch = PaddedBatch::from_sequences(&inputs, config.t_max)?;
    let embedded = embed_input(tape, bound, base, &batch)?;
    let dims = config.encoder_dims();
    let h = if options.dropout && config.dropout > 0.0 {
        let mut src = DropoutSource { rate: config.dropout, rng: &mut *rng };
        encode(tape, bound, &dims, embedded, &batch, Some(&mut src))
    } else {
        encode::<ChaCha8Rng>(tape, bound, &dims, embedded, &batch, None)
    };

    // every valid (user, position) is an anchor
    let mut anchors = Vec::new();
    let mut flat = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        for t in 0..s.input.len() {
            anchors.push(Anchor { user_id: s.user_id, graph_sequence: s.graph_sequence, input: s.input, position: t });
            flat.push(batch.flat_index(b, t));
        }
    }
    let items: Vec<usize> = anchors.iter().map(|a| a.input[a.position]).collect();
    if items.contains(&PAD) {
        return Err(Error::Contract("training input contains the pad token".into()));
    }
    let h_anchor = tape.gather_rows(h, flat);
    let x_anchor = tape.gather_rows(x, items.clone());

    let ops = channel_operators(&anchors, &graphs.transition_raw, config.gnn_layers)?;
    let channels = channels_on_tape(tape, &ops, x_anchor, x, graph_base);
    let mean = if config.detach_conformity {
        let v = tape.value(channels.mean).clone();
        tape.leaf(v)
    } else {
        channels.mean
    };
    let (mut omega, mut psi) = transform_on_tape(tape, mean, config.mu_c);
    let fixed = match (options.weight_override, config.ablation) {
        (Some(w), _) => Some(w),
        (None, Ablation::AdaptiveCl) => Some(0.5),
        _ => None,
    };
    if let Some(w) = fixed {
        omega = tape.leaf(Array2::from_elem((anchors.len(), 1), w));
        psi = tape.leaf(Array2::from_elem((anchors.len(), 1), w));
    }
    let phi = sample_targets(anchors.len(), config.mu_c, config.sigma, rng)?;
    let l_w = tape.kl_to_target(omega, phi, KL_EPS);

    let l_u = if config.ablation.keeps_user_cl() {
        contrastive_on_tape(tape, h_anchor, x, &items, omega, config.tau, config.negatives)?
    } else {
        tape.constant_scalar(0.0)
    };
    let l_v = if config.ablation.keeps_item_cl() {
        contrastive_on_tape(tape, x_anchor, z, &items, psi, config.tau, config.negatives)?
    } else {
        tape.constant_scalar(0.0)
    };

    let last_flat: Vec<usize> = samples.iter().enumerate().map(|(b, s)| batch.flat_index(b, s.input.len() - 1)).collect();
    let last_items: Vec<usize> = samples.iter().map(|s| s.input[s.input.len() - 1]).collect();
    let h_last = tape.gather_rows(h, last_flat);
    let x_last = tape.gather_rows(x, last_items.clone());
    let z_last = tape.gather_rows(z, last_items);
    let (p, _) = fuse_on_tape(tape, [h_last, x_last, z_last], bound.var(FUSION_A), bound.var(FUSION_W));
    let scores = score_candidates_on_tape(tape, p, base);
    let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
    let l_rec = recommendation_loss_on_tape(tape, scores, &targets)?;

    let total = total_on_tape(tape, l_rec, l_u, l_v, l_w, config.lambda1, config.lambda2);
    let bundle = total_loss(
        tape.scalar_value(l_rec),
        tape.scalar_value(l_u),
        tape.scalar_value(l_v),
        tape.scalar_value(l_w),
        config.lambda1,
        config.lambda2,
        config.tau,
    )?;

    let (av, bv, gv, wv, pv) = (
        tape.value(channels.alpha),
        tape.value(channels.beta),
        tape.value(channels.gamma),
        tape.value(omega),
        tape.value(psi),
    );
    let conformity = ConformityWeights {
        entries: anchors
            .iter()
            .enumerate()
            .map(|(i, a)| ConformityEntry {
                user_id: a.user_id,
                position: a.position,
                raw: [av[[i, 0]], bv[[i, 0]], gv[[i, 0]]],
                omega: wv[[i, 0]],
                psi: pv[[i, 0]],
            })
            .collect(),
    };
    Ok(BatchForward { l_rec, l_u, l_v, l_w, total, bundle, conformity })
}

/// Rough peak working-set estimate of one training step, in MB.
pub fn estimate_step_mb(config: &TrainConfig, catalog_size: usize) -> f64 {
    let (b, t, d, v) = (config.batch_size as f64, config.t_max as f64, config.embed_dim as f64, catalog_size as f64 + 1.0);
    let anchors = b * t;
    let cl = 2.0 * 3.0 * anchors * v;
    let attention = config.transformer_layers as f64 * b * config.heads as f64 * t * t * 4.0;
    let activations = config.transformer_layers as f64 * anchors * (12.0 * d + 3.0 * config.ffn_hidden as f64);
    let tables = (config.gnn_layers as f64 * 4.0 + 10.0) * v * d;
    let scores = 3.0 * b * v;
    (cl + attention + activations + tables + scores) * 8.0 / 1e6
}

/// Frozen parameters plus precomputed graph views for scoring.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub x: Mat,
    pub z: Mat,
}

impl Snapshot {
    pub fn new(config: &TrainConfig, params: &ParamStore, graphs: &Graphs) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (_, graph_base) = table_vars(&bound);
        let x = propagate(&mut tape, &graphs.transition, graph_base, config.gnn_layers)?.final_embeddings;
        let z = propagate(&mut tape, &graphs.cointeraction, graph_base, config.gnn_layers)?.final_embeddings;
        Ok(Snapshot { config: config.clone(), params: params.clone(), x: tape.value(x).clone(), z: tape.value(z).clone() })
    }

    pub fn item_table(&self) -> &Mat {
        self.params.get(ITEM_EMBEDDINGS).expect("item table")
    }

    pub fn catalog_size(&self) -> usize {
        self.item_table().nrows() - 1
    }

    /// Fused last-position representation for each history (no dropout).
    /// Histories are bucketed by length so each chunk pads little.
    pub fn user_vectors(&self, histories: &[&[usize]]) -> Result<Mat> {
        let t_max = self.config.t_max;
        let trimmed: Vec<&[usize]> = histories.iter().map(|h| &h[h.len().saturating_sub(t_max)..]).collect();
        if let Some(pos) = trimmed.iter().position(|h| h.is_empty()) {
            return Err(Error::InvalidArgument(format!("history {pos} is empty")));
        }
        let mut order: Vec<usize> = (0..trimmed.len()).collect();
        order.sort_by_key(|&i| (trimmed[i].len(), i));
        let sorted: Vec<&[usize]> = order.iter().map(|&i| trimmed[i]).collect();
        let chunk = self.config.eval_batch_size.max(1);
        let parts: Vec<Result<Mat>> = sorted.par_chunks(chunk).map(|c| self.fuse_chunk(c)).collect();
        let mut out = Array2::zeros((trimmed.len(), self.config.embed_dim));
        let mut k = 0;
        for p in parts {
            for row in p?.outer_iter() {
                out.row_mut(order[k]).assign(&row);
                k += 1;
            }
        }
        Ok(out)
    }

    fn fuse_chunk(&self, histories: &[&[usize]]) -> Result<Mat> {
        let batch = PaddedBatch::from_sequences(histories, self.config.t_max)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let embedded = embed_input(&mut tape, &bound, bound.var(ITEM_EMBEDDINGS), &batch)?;
        let h = encode::<ChaCha8Rng>(&mut tape, &bound, &self.config.encoder_dims(), embedded, &batch, None);
        let last_flat: Vec<usize> = histories.iter().enumerate().map(|(b, s)| batch.flat_index(b, s.len() - 1)).collect();
        let last_items: Vec<usize> = histories.iter().map(|s| s[s.len() - 1]).collect();
        let h_last = tape.gather_rows(h, last_flat);
        let x = tape.leaf(self.x.select(ndarray::Axis(0), &last_items));
        let z = tape.leaf(self.z.select(ndarray::Axis(0), &last_items));
        let (p, _) = fuse_on_tape(&mut tape, [h_last, x, z], bound.var(FUSION_A), bound.var(FUSION_W));
        Ok(tape.value(p).clone())
    }

    /// Full-catalog scores; column `j` is item token `j + 1`.
    pub fn score(&self, histories: &[&[usize]]) -> Result<Mat> {
        Ok(score_candidates(&self.user_vectors(histories)?, self.item_table()))
    }

    /// Per-item fused view: `fuse(v, x_v, z_v)` for tokens 1..=V.
    pub fn fused_items(&self) -> Mat {
        let table = self.item_table();
        let mut tape = Tape::new();
        let h = tape.leaf(table.slice(s![1.., ..]).to_owned());
        let x = tape.leaf(self.x.slice(s![1.., ..]).to_owned());
        let z = tape.leaf(self.z.slice(s![1.., ..]).to_owned());
        let a = tape.leaf(self.params.get(FUSION_A).expect("fusion a").clone());
        let w = tape.leaf(self.params.get(FUSION_W).expect("fusion w").clone());
        let (p, _) = fuse_on_tape(&mut tape, [h, x, z], a, w);
        tape.value(p).clone()
    }
}

/// Draw one training sample per user with at least two training items.
/// With `prefix_augment` the cut point is uniform over the history;
/// otherwise the whole history predicts its last item.
pub fn draw_samples<'a>(split: &'a SplitDataset, prefix_augment: bool, rng: &mut impl Rng) -> Vec<Sample<'a>> {
    split
        .train_sequences
        .iter()
        .filter(|s| s.items.len() >= 2)
        .map(|s| {
            let n = s.items.len();
            let cut = if prefix_augment { rng.random_range(1..n) } else { n - 1 };
            Sample { user_id: s.user_id, graph_sequence: &s.items, input: &s.items[..cut], target: s.items[cut] }
        })
        .collect()
}
