//! Small sparse helpers shared by the estimators.
//!
//! Rows are kept as sorted `(column, value)` lists; anything matrix-shaped is
//! stored in `sprs` compressed form.

use sprs::{CsMat, TriMat};

/// A sparse real row vector with sorted, unique column indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRow {
    entries: Vec<(usize, f64)>,
}

impl SparseRow {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a row from unsorted entries, summing duplicates.
    pub fn from_entries<I: IntoIterator<Item = (usize, f64)>>(iter: I) -> Self {
        let mut entries: Vec<(usize, f64)> = iter.into_iter().collect();
        entries.sort_by_key(|&(c, _)| c);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (c, v) in entries {
            match merged.last_mut() {
                Some((lc, lv)) if *lc == c => *lv += v,
                _ => merged.push((c, v)),
            }
        }
        Self { entries: merged }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, col: usize) -> f64 {
        self.entries
            .binary_search_by_key(&col, |&(c, _)| c)
            .map(|k| self.entries[k].1)
            .unwrap_or(0.0)
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.entries.iter().map(|&(c, v)| v * x[c]).sum()
    }

    /// `self + scale * other`
    pub fn axpy(&self, scale: f64, other: &SparseRow) -> SparseRow {
        SparseRow::from_entries(
            self.entries
                .iter()
                .copied()
                .chain(other.entries.iter().map(|&(c, v)| (c, scale * v))),
        )
    }

    pub fn scaled(&self, scale: f64) -> SparseRow {
        SparseRow {
            entries: self.entries.iter().map(|&(c, v)| (c, scale * v)).collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v * v).sum()
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for &(c, v) in &self.entries {
            out[c] += v;
        }
        out
    }
}

/// Stacks rows into a CSR matrix with `ncols` columns.
pub fn rows_to_csr(rows: &[SparseRow], ncols: usize) -> CsMat<f64> {
    let mut tri = TriMat::new((rows.len(), ncols));
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row.entries() {
            tri.add_triplet(r, c, v);
        }
    }
    tri.to_csr()
}

/// `y = A x` for a matrix in either storage order.
pub fn mat_vec(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.cols(), x.len(), "mat_vec dimension mismatch");
    let mut y = vec![0.0; a.rows()];
    for (&v, (r, c)) in a.iter() {
        y[r] += v * x[c];
    }
    y
}

/// `y = Aᵀ x` for a matrix in either storage order.
pub fn mat_t_vec(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.rows(), x.len(), "mat_t_vec dimension mismatch");
    let mut y = vec![0.0; a.cols()];
    for (&v, (r, c)) in a.iter() {
        y[c] += v * x[r];
    }
    y
}

/// Weighted Gram matrix `Σ_k w_k a_k a_kᵀ` over sparse rows, in CSC form.
pub fn weighted_gram(rows: &[SparseRow], weights: &[f64], n: usize) -> CsMat<f64> {
    assert_eq!(rows.len(), weights.len());
    let mut tri = TriMat::new((n, n));
    for (row, &w) in rows.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for &(i, vi) in row.entries() {
            for &(j, vj) in row.entries() {
                tri.add_triplet(i, j, w * vi * vj);
            }
        }
    }
    tri.to_csc()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_entries_merges_duplicates() {
        let r = SparseRow::from_entries([(3, 1.0), (1, 2.0), (3, 0.5)]);
        assert_eq!(r.entries(), &[(1, 2.0), (3, 1.5)]);
        assert_eq!(r.get(3), 1.5);
        assert_eq!(r.get(2), 0.0);
    }

    #[test]
    fn gram_matches_dense() {
        let rows = vec![
            SparseRow::from_entries([(0, 1.0), (2, -1.0)]),
            SparseRow::from_entries([(1, 3.0)]),
        ];
        let g = weighted_gram(&rows, &[2.0, 0.5], 3);
        let dense = g.to_dense();
        assert_eq!(dense[[0, 0]], 2.0);
        assert_eq!(dense[[0, 2]], -2.0);
        assert_eq!(dense[[1, 1]], 4.5);
        assert_eq!(dense[[2, 2]], 2.0);
    }

    #[test]
    fn transpose_product() {
        let rows = vec![SparseRow::from_entries([(0, 1.0), (1, 2.0)])];
        let a = rows_to_csr(&rows, 2);
        assert_eq!(mat_vec(&a, &[1.0, 1.0]), vec![3.0]);
        assert_eq!(mat_t_vec(&a, &[2.0]), vec![2.0, 4.0]);
    }
}
