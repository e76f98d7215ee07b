//! Item transition graph, item co-interaction graph, symmetric degree
//! normalization and per-user perturbation of the transition graph.
//!
//! Node ids are item tokens; node 0 is the pad slot and never carries an edge.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataio::PAD;
use crate::error::{Error, Result};
use crate::sparse::Csr;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    node_count: usize,
    adjacency: Csr,
    /// Weighted degree of the unnormalized graph.
    degree: Vec<f64>,
    normalized: bool,
    /// Users whose transitions have been subtracted (sorted).
    removed_users: Vec<usize>,
}

impl SparseGraph {
    /// Symmetric graph from unordered pair weights `(i, j) -> w` with `i < j`.
    pub fn from_pairs(node_count: usize, pairs: &BTreeMap<(usize, usize), f64>) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); node_count];
        for (&(i, j), &w) in pairs {
            debug_assert!(i != j && i != PAD && j != PAD);
            if w > 0.0 {
                rows[i].push((j, w));
                rows[j].push((i, w));
            }
        }
        let adjacency = Csr::from_rows(node_count, rows);
        let degree = (0..node_count).map(|r| adjacency.row(r).map(|(_, w)| w).sum()).collect();
        SparseGraph {
            node_count,
            adjacency,
            degree,
            normalized: false,
            removed_users: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adjacency
    }

    pub fn degree(&self, node: usize) -> f64 {
        self.degree[node]
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degree
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn removed_users(&self) -> &[usize] {
        &self.removed_users
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency.get(i, j)
    }

    /// Coordinate list with both directions of every edge, row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        (0..self.node_count)
            .flat_map(|i| self.adjacency.row(i).map(move |(j, w)| (i, j, w)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.adjacency.row(node)
    }

    fn unordered_pairs(&self) -> BTreeMap<(usize, usize), f64> {
        self.edges()
            .into_iter()
            .filter(|&(i, j, _)| i < j)
            .map(|(i, j, w)| ((i, j), w))
            .collect()
    }

    /// Debug dump as `i\tj\tweight`, one line per stored direction.
    pub fn dump_tsv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (i, j, w) in self.edges() {
            writeln!(out, "{i}\t{j}\t{w}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Unordered adjacent pairs of one sequence (self-adjacency and pad skipped).
/// A pair repeated within one sequence is counted once.
pub fn sequence_transitions(sequence: &[usize]) -> BTreeSet<(usize, usize)> {
    sequence
        .windows(2)
        .filter(|w| w[0] != w[1] && w[0] != PAD && w[1] != PAD)
        .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
        .collect()
}

/// Sum of per-user transition indicators: edge weight = number of users
/// in whose sequence the two items are adjacent.
pub fn build_transition_graph<'a, I>(sequences: I, node_count: usize) -> Result<SparseGraph>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut any = false;
    for seq in sequences {
        any = true;
        for pair in sequence_transitions(seq) {
            check_node(pair.1, node_count)?;
            *pairs.entry(pair).or_default() += 1.0;
        }
    }
    if !any {
        return Err(Error::Graph("no sequences given".into()));
    }
    Ok(SparseGraph::from_pairs(node_count, &pairs))
}

fn check_node(node: usize, node_count: usize) -> Result<()> {
    if node >= node_count {
        return Err(Error::Graph(format!("item {node} outside graph of {node_count} nodes")));
    }
    Ok(())
}

/// `RᵀR` without the diagonal, sparsified to the `k` heaviest neighbors of
/// each item (ties: lower id first) and re-symmetrized by union.
pub fn build_cointeraction_graph<'a, I>(user_items: I, node_count: usize, k: usize) -> Result<SparseGraph>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    if k == 0 {
        return Err(Error::InvalidArgument("top-k must be >= 1".into()));
    }
    let mut raw: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for items in user_items {
        let distinct: BTreeSet<usize> = items.iter().copied().filter(|&i| i != PAD).collect();
        let distinct: Vec<usize> = distinct.into_iter().collect();
        if let Some(&last) = distinct.last() {
            check_node(last, node_count)?;
        }
        for (a, &i) in distinct.iter().enumerate() {
            for &j in &distinct[a + 1..] {
                *raw.entry((i, j)).or_default() += 1.0;
            }
        }
    }
    let full = SparseGraph::from_pairs(node_count, &raw);
    let mut kept: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for node in 0..node_count {
        let mut nbrs: Vec<(usize, f64)> = full.neighbors(node).collect();
        nbrs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, w) in nbrs.iter().take(k) {
            kept.insert((node.min(j), node.max(j)), w);
        }
    }
    Ok(SparseGraph::from_pairs(node_count, &kept))
}

/// `D^{-1/2} A D^{-1/2}`; isolated nodes contribute zero.
pub fn normalize(graph: &SparseGraph) -> Result<SparseGraph> {
    if graph.normalized {
        return Err(Error::Graph("graph is already normalized".into()));
    }
    let inv_sqrt: Vec<f64> = graph
        .degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut adjacency = graph.adjacency.clone();
    for r in 0..adjacency.rows {
        for idx in adjacency.indptr[r]..adjacency.indptr[r + 1] {
            let c = adjacency.indices[idx];
            adjacency.values[idx] *= inv_sqrt[r] * inv_sqrt[c];
        }
    }
    Ok(SparseGraph {
        node_count: graph.node_count,
        adjacency,
        degree: graph.degree.clone(),
        normalized: true,
        removed_users: graph.removed_users.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedGraph {
    pub removed_user: usize,
    /// Unnormalized weights after subtraction.
    pub raw: SparseGraph,
    /// `raw` renormalized with its own (perturbed) degrees.
    pub normalized: SparseGraph,
}

/// Subtract one user's transitions from the unnormalized transition graph and
/// renormalize.
pub fn perturb_for_user(graph: &SparseGraph, user: usize, sequence: &[usize]) -> Result<PerturbedGraph> {
    if graph.normalized {
        return Err(Error::Graph("perturbation requires the unnormalized graph".into()));
    }
    if graph.removed_users.binary_search(&user).is_ok() {
        return Err(Error::Graph(format!("user {user} already removed from this graph")));
    }
    let mut pairs = graph.unordered_pairs();
    for pair in sequence_transitions(sequence) {
        match pairs.get_mut(&pair) {
            Some(w) if *w >= 1.0 => *w -= 1.0,
            _ => {
                return Err(Error::Graph(format!(
                    "user {user} transition {pair:?} is not present in the graph"
                )))
            }
        }
    }
    pairs.retain(|_, w| *w > 0.0);
    let mut raw = SparseGraph::from_pairs(graph.node_count, &pairs);
    raw.removed_users = graph.removed_users.clone();
    let pos = raw.removed_users.binary_search(&user).unwrap_err();
    raw.removed_users.insert(pos, user);
    let normalized = normalize(&raw)?;
    Ok(PerturbedGraph {
        removed_user: user,
        raw,
        normalized,
    })
}

/// Read-only view of the transition graph with one user's transitions
/// subtracted, computed lazily row by row.
#[derive(Debug, Clone)]
pub struct PerturbationView<'a> {
    base: &'a SparseGraph,
    removed: BTreeSet<(usize, usize)>,
    degree_drop: BTreeMap<usize, f64>,
}

impl<'a> PerturbationView<'a> {
    pub fn new(base: &'a SparseGraph, sequence: &[usize]) -> Result<Self> {
        if base.normalized {
            return Err(Error::Graph("perturbation requires the unnormalized graph".into()));
        }
        let removed = sequence_transitions(sequence);
        let mut degree_drop: BTreeMap<usize, f64> = BTreeMap::new();
        for &(i, j) in &removed {
            if base.weight(i, j) < 1.0 {
                return Err(Error::Graph(format!("transition {:?} is not present in the graph", (i, j))));
            }
            *degree_drop.entry(i).or_default() += 1.0;
            *degree_drop.entry(j).or_default() += 1.0;
        }
        Ok(PerturbationView {
            base,
            removed,
            degree_drop,
        })
    }

    fn removed_weight(&self, i: usize, j: usize) -> f64 {
        if self.removed.contains(&(i.min(j), i.max(j))) {
            1.0
        } else {
            0.0
        }
    }

    pub fn node_count(&self) -> usize {
        self.base.node_count()
    }

    pub fn degree(&self, node: usize) -> f64 {
        self.base.degree(node) - self.degree_drop.get(&node).copied().unwrap_or(0.0)
    }

    /// Neighbors with positive weight after the subtraction.
    pub fn raw_row(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.base
            .neighbors(node)
            .map(move |(j, w)| (j, w - self.removed_weight(node, j)))
            .filter(|&(_, w)| w > 0.0)
    }

    pub fn normalized_row(&self, node: usize) -> Vec<(usize, f64)> {
        let di = self.degree(node);
        if di <= 0.0 {
            return Vec::new();
        }
        self.raw_row(node)
            .map(|(j, w)| (j, w / (di.sqrt() * self.degree(j).sqrt())))
            .collect()
    }

    /// Outer neighbors: items adjacent to `node` through edges not
    /// contributed by the removed user.
    pub fn outer_neighbors(&self, node: usize) -> Vec<usize> {
        self.raw_row(node).map(|(j, _)| j).filter(|&j| j != node).collect()
    }
}
