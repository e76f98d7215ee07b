//! Compressed sparse row matrices and sparse-dense products.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Csr {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from per-row entry lists. Entries within a row are sorted by
    /// column and duplicate columns summed.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows.iter().cloned() {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                debug_assert!(c < cols);
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Csr {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.indptr[r], self.indptr[r + 1]);
        self.indices[s..e]
            .iter()
            .copied()
            .zip(self.values[s..e].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (s, e) = (self.indptr[r], self.indptr[r + 1]);
        match self.indices[s..e].binary_search(&c) {
            Ok(pos) => self.values[s + pos],
            Err(_) => 0.0,
        }
    }

    /// `self · dense`.
    pub fn spmm(&self, dense: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(self.cols, dense.nrows(), "spmm shape mismatch");
        let d = dense.ncols();
        let mut out = Array2::<f64>::zeros((self.rows, d));
        out.outer_iter_mut()
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut out_row)| {
                for (c, v) in self.row(r) {
                    out_row.scaled_add(v, &dense.row(c));
                }
            });
        out
    }

    /// `selfᵀ · dense`.
    pub fn spmm_t(&self, dense: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(self.rows, dense.nrows(), "spmm_t shape mismatch");
        let d = dense.ncols();
        let mut out = Array2::<f64>::zeros((self.cols, d));
        for r in 0..self.rows {
            let src = dense.row(r);
            for (c, v) in self.row(r) {
                out.row_mut(c).scaled_add(v, &src);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] += v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn products_match_dense() {
        let m = Csr::from_rows(3, vec![vec![(2, 1.5), (0, 2.0)], vec![], vec![(1, -1.0), (1, 0.5)]]);
        let dense = m.to_dense();
        assert_eq!(dense, array![[2.0, 0.0, 1.5], [0.0, 0.0, 0.0], [0.0, -0.5, 0.0]]);
        let b = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(m.spmm(b.view()), dense.dot(&b));
        assert_eq!(m.spmm_t(b.view()), dense.t().dot(&b));
        assert_eq!(m.get(0, 2), 1.5);
        assert_eq!(m.get(1, 2), 0.0);
    }
}
