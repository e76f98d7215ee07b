//! Transformer sequential pattern encoder.
//!
//! Blocks are bidirectional over the valid prefix: attention keys at padded
//! positions are masked, so valid-position outputs never depend on pad rows.
//! Each block is `LN(x + MH(x)·W_D)` followed by `LN(x + FFN(x))`, with
//! `FFN(x) = GELU(x·W1 + b1)·W2 + b2`.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal_init, Bound, ParamStore};
use crate::tape::{Mat, Tape, Var};

pub const ITEM_EMBEDDINGS: &str = "item_embeddings";
pub const POSITIONAL_EMBEDDINGS: &str = "positional_embeddings";
const LN_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub t_max: usize,
    pub dropout: f64,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.t_max < 2 {
            return Err(Error::Config("t_max must be >= 2".into()));
        }
        Ok(())
    }
}

fn block_name(block: usize, field: &str) -> String {
    format!("blocks.{block}.{field}")
}

/// Register encoder parameters. The item table has `item_rows` rows
/// (catalog + pad); its pad row is zero.
pub fn init_params<R: Rng>(store: &mut ParamStore, dims: &EncoderDims, item_rows: usize, rng: &mut R) {
    let d = dims.embed_dim;
    let mut items = normal_init(item_rows, d, INIT_STD, rng);
    items.row_mut(0).fill(0.0);
    store.insert(ITEM_EMBEDDINGS, items);
    store.insert(POSITIONAL_EMBEDDINGS, normal_init(dims.t_max, d, INIT_STD, rng));
    for b in 0..dims.blocks {
        for w in ["w_q", "w_k", "w_v", "w_d"] {
            store.insert(block_name(b, w), normal_init(d, d, INIT_STD, rng));
        }
        store.insert(block_name(b, "w1"), normal_init(d, dims.ffn_hidden, INIT_STD, rng));
        store.insert(block_name(b, "b1"), Array2::zeros((1, dims.ffn_hidden)));
        store.insert(block_name(b, "w2"), normal_init(dims.ffn_hidden, d, INIT_STD, rng));
        store.insert(block_name(b, "b2"), Array2::zeros((1, d)));
        for ln in ["ln1", "ln2"] {
            store.insert(block_name(b, &format!("{ln}_gamma")), Array2::ones((1, d)));
            store.insert(block_name(b, &format!("{ln}_beta")), Array2::zeros((1, d)));
        }
    }
}

/// A batch of left-aligned padded token sequences, all trimmed to `seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
}

impl PaddedBatch {
    /// Pads to the longest sequence in the batch (≤ `t_max`).
    pub fn from_sequences(seqs: &[&[usize]], t_max: usize) -> Result<Self> {
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
        if seq_len > t_max {
            return Err(Error::InvalidArgument(format!("sequence of length {seq_len} exceeds t_max {t_max}")));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(crate::dataio::PAD, seq_len - s.len()));
        }
        Ok(PaddedBatch {
            tokens,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            seq_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn flat_index(&self, b: usize, t: usize) -> usize {
        b * self.seq_len + t
    }
}

/// Dropout masks are drawn from this source when training.
pub struct DropoutSource<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> DropoutSource<'_, R> {
    fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..len)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }
}

/// Row `t` = item embedding of token `t` + positional embedding `t`.
pub fn embed_input(tape: &mut Tape, bound: &Bound, item_table: Var, batch: &PaddedBatch) -> Result<Var> {
    let rows = tape.value(item_table).nrows();
    if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= rows) {
        return Err(Error::InvalidArgument(format!("item token {bad} outside table of {rows} rows")));
    }
    let pos_table = bound.var(POSITIONAL_EMBEDDINGS);
    let t_max = tape.value(pos_table).nrows();
    if batch.seq_len > t_max {
        return Err(Error::InvalidArgument("sequence longer than positional table".into()));
    }
    let items = tape.gather_rows(item_table, batch.tokens.clone());
    let positions: Vec<usize> = (0..batch.batch_size()).flat_map(|_| 0..batch.seq_len).collect();
    let pos = tape.gather_rows(pos_table, positions);
    Ok(tape.add(items, pos))
}

/// Run all blocks; returns (batch·seq_len)×d hidden states.
pub fn encode<R: Rng>(
    tape: &mut Tape,
    bound: &Bound,
    dims: &EncoderDims,
    input: Var,
    batch: &PaddedBatch,
    mut dropout: Option<&mut DropoutSource<'_, R>>,
) -> Var {
    let mut x = input;
    let n_rows = batch.batch_size() * batch.seq_len;
    for b in 0..dims.blocks {
        let v = |name: &str| bound.var(&block_name(b, name));
        let q = tape.matmul(x, v("w_q"));
        let k = tape.matmul(x, v("w_k"));
        let val = tape.matmul(x, v("w_v"));
        let keep = dropout.as_mut().map(|src| {
            let cells = batch.seq_len * batch.seq_len;
            (0..batch.batch_size() * dims.heads).map(|_| src.mask(cells)).collect()
        });
        let att = tape.attention(q, k, val, batch.batch_size(), batch.seq_len, dims.heads, batch.lengths.clone(), keep);
        let projected = tape.matmul(att, v("w_d"));
        let res = tape.add(x, projected);
        let x1 = tape.layer_norm(res, v("ln1_gamma"), v("ln1_beta"), LN_EPS);

        let hidden = tape.matmul(x1, v("w1"));
        let hidden = tape.add_row(hidden, v("b1"));
        let hidden = tape.gelu(hidden);
        let mut ffn = tape.matmul(hidden, v("w2"));
        ffn = tape.add_row(ffn, v("b2"));
        if let Some(src) = dropout.as_mut() {
            let mask = Array2::from_shape_vec((n_rows, dims.embed_dim), src.mask(n_rows * dims.embed_dim)).unwrap();
            ffn = tape.mul_const(ffn, Arc::new(mask));
        }
        let res = tape.add(x1, ffn);
        x = tape.layer_norm(res, v("ln2_gamma"), v("ln2_beta"), LN_EPS);
    }
    x
}

/// Deterministic (dropout-free) encoding of plain sequences; returns one
/// seq_len×d matrix per sequence, padded rows included.
pub fn encode_values(store: &ParamStore, dims: &EncoderDims, seqs: &[&[usize]]) -> Result<Vec<Mat>> {
    let batch = PaddedBatch::from_sequences(seqs, dims.t_max)?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let input = embed_input(&mut tape, &bound, bound.var(ITEM_EMBEDDINGS), &batch)?;
    let out = encode::<rand_chacha::ChaCha8Rng>(&mut tape, &bound, dims, input, &batch, None);
    let h = tape.value(out);
    Ok((0..batch.batch_size())
        .map(|b| h.slice(ndarray::s![b * batch.seq_len..(b + 1) * batch.seq_len, ..]).to_owned())
        .collect())
}
