//! Weight-free graph convolution: `X⁽ˡ⁺¹⁾ = Â X⁽ˡ⁾`, aggregated by the mean
//! over layers 0..=L.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graphs::{PerturbationView, SparseGraph};
use crate::sparse::Csr;
use crate::tape::{Mat, Tape, Var};

pub const DEFAULT_LAYERS: usize = 2;

#[derive(Debug, Clone)]
pub struct GraphEmbeddings {
    pub layer_outputs: Vec<Var>,
    pub final_embeddings: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbeddingValues {
    pub layer_outputs: Vec<Mat>,
    pub final_embeddings: Mat,
}

/// Normalized adjacency as a shared CSR operator for the tape.
pub fn operator(graph: &SparseGraph) -> Result<Arc<Csr>> {
    if !graph.is_normalized() {
        return Err(Error::Graph("propagation requires a normalized graph".into()));
    }
    Ok(Arc::new(graph.adjacency().clone()))
}

pub fn propagate(tape: &mut Tape, adjacency: &Arc<Csr>, base: Var, layers: usize) -> Result<GraphEmbeddings> {
    if layers == 0 {
        return Err(Error::InvalidArgument("layers must be >= 1".into()));
    }
    let mut outputs = vec![base];
    for _ in 0..layers {
        let prev = *outputs.last().unwrap();
        outputs.push(tape.spmm(adjacency.clone(), prev));
    }
    let mut acc = outputs[0];
    for &o in &outputs[1..] {
        acc = tape.add(acc, o);
    }
    let final_embeddings = tape.scale(acc, 1.0 / (layers + 1) as f64);
    Ok(GraphEmbeddings {
        layer_outputs: outputs,
        final_embeddings,
    })
}

pub fn propagate_values(graph: &SparseGraph, base: &Mat, layers: usize) -> Result<GraphEmbeddingValues> {
    let op = operator(graph)?;
    let mut tape = Tape::new();
    let b = tape.leaf(base.clone());
    let emb = propagate(&mut tape, &op, b, layers)?;
    Ok(GraphEmbeddingValues {
        layer_outputs: emb.layer_outputs.iter().map(|&v| tape.value(v).clone()).collect(),
        final_embeddings: tape.value(emb.final_embeddings).clone(),
    })
}

/// Propagate the same base table over both graphs.
pub fn encode_both(
    tape: &mut Tape,
    transition: &Arc<Csr>,
    cointeraction: &Arc<Csr>,
    base: Var,
    layers: usize,
) -> Result<(GraphEmbeddings, GraphEmbeddings)> {
    Ok((
        propagate(tape, transition, base, layers)?,
        propagate(tape, cointeraction, base, layers)?,
    ))
}

/// Rows of the layer-mean propagation operator `(1/(L+1)) Σ_l Āˡ` of the
/// perturbed graph, one sparse row per requested node. Multiplying a row by
/// the base table gives that node's perturbed graph embedding without
/// materializing the perturbed graph.
pub fn perturbed_operator_rows(view: &PerturbationView<'_>, nodes: &[usize], layers: usize) -> Vec<Vec<(usize, f64)>> {
    let n = view.node_count();
    let scale = 1.0 / (layers + 1) as f64;
    let mut rows: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
    let mut done: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
    // dense scratch buffers with touched-index lists
    let mut total = vec![0.0; n];
    let mut frontier = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut touched_total: Vec<usize> = Vec::new();
    let mut in_total = vec![false; n];
    nodes
        .iter()
        .map(|&node| {
            if let Some(r) = done.get(&node) {
                return r.clone();
            }
            let mut active = vec![node];
            frontier[node] = 1.0;
            total[node] = scale;
            in_total[node] = true;
            touched_total.push(node);
            for _ in 0..layers {
                let mut next_active = Vec::new();
                for &i in &active {
                    let coef = frontier[i];
                    frontier[i] = 0.0;
                    let row = rows.entry(i).or_insert_with(|| view.normalized_row(i));
                    for &(j, w) in row.iter() {
                        if next[j] == 0.0 {
                            next_active.push(j);
                        }
                        next[j] += coef * w;
                    }
                }
                for &j in &next_active {
                    if !in_total[j] {
                        in_total[j] = true;
                        touched_total.push(j);
                    }
                    total[j] += scale * next[j];
                }
                std::mem::swap(&mut frontier, &mut next);
                active = next_active;
            }
            for &i in &active {
                frontier[i] = 0.0;
            }
            touched_total.sort_unstable();
            let row: Vec<(usize, f64)> = touched_total
                .iter()
                .map(|&j| (j, std::mem::take(&mut total[j])))
                .filter(|&(_, v)| v != 0.0)
                .collect();
            for &j in &touched_total {
                in_total[j] = false;
            }
            touched_total.clear();
            done.insert(node, row.clone());
            row
        })
        .collect()
}
