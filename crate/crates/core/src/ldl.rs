//! Sparse `LDLᵀ` factorization for symmetric systems.
//!
//! The numeric kernel is the classic up-looking elimination-tree algorithm
//! (no dynamic pivoting). Stability comes from the caller: the elimination
//! order is fixed up front by [`minimum_degree_order`], and every pivot is
//! checked against an expected sign and a relative magnitude floor. A pivot
//! that fails the check is reported as [`LdlError::BadPivot`], which the
//! estimators surface as rank deficiency (unobservability).

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use sprs::CsMat;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdlError {
    #[error("matrix is {rows}x{cols}; a square matrix of order {expected} is required")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("pivot {pivot:e} for variable {variable} fails the sign/magnitude test")]
    BadPivot { variable: usize, pivot: f64 },
}

/// Acceptance test applied to each pivot as it is produced.
///
/// `signs[v]` is the expected sign of the pivot belonging to original
/// variable `v` (`+1` or `-1`); `scale[v]` is the magnitude the pivot is
/// compared against. A pivot is accepted when it has the expected sign and
/// `|d| > rel_tol * scale[v]`.
#[derive(Clone, Debug)]
pub struct PivotRule {
    pub signs: Vec<i8>,
    pub scale: Vec<f64>,
    pub rel_tol: f64,
}

impl PivotRule {
    /// Positive pivots measured against the matrix diagonal (SPD systems).
    pub fn positive_definite(a: &CsMat<f64>, rel_tol: f64) -> Self {
        let n = a.rows();
        Self {
            signs: vec![1; n],
            scale: diagonal(a),
            rel_tol,
        }
    }

    fn accepts(&self, var: usize, d: f64) -> bool {
        if !d.is_finite() || d == 0.0 {
            return false;
        }
        let sign_ok = if self.signs[var] >= 0 {
            d > 0.0
        } else {
            d < 0.0
        };
        sign_ok && d.abs() > self.rel_tol * self.scale[var]
    }
}

pub fn diagonal(a: &CsMat<f64>) -> Vec<f64> {
    let mut d = vec![0.0; a.rows().min(a.cols())];
    for (&v, (r, c)) in a.iter() {
        if r == c {
            d[r] += v;
        }
    }
    d
}

/// Minimum-degree elimination order over groups of variables.
///
/// `group_of[v]` assigns each variable to a group; groups are eliminated as
/// units (all members consecutively, ascending). Groups flagged in `deferred`
/// are only eligible once every other group has been eliminated. Ties break
/// on the lowest group id, so the order is deterministic.
pub fn minimum_degree_order(a: &CsMat<f64>, group_of: &[usize], deferred: &[bool]) -> Vec<usize> {
    let n_groups = deferred.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (v, &g) in group_of.iter().enumerate() {
        members[g].push(v);
    }
    let mut adj: Vec<HashSet<usize>> = vec![HashSet::new(); n_groups];
    for (_, (r, c)) in a.iter() {
        let (gr, gc) = (group_of[r], group_of[c]);
        if gr != gc {
            adj[gr].insert(gc);
            adj[gc].insert(gr);
        }
    }

    let mut heap = BinaryHeap::new();
    for g in 0..n_groups {
        heap.push(Reverse((deferred[g], adj[g].len(), g)));
    }
    let mut done = vec![false; n_groups];
    let mut order = Vec::with_capacity(group_of.len());
    while let Some(Reverse((_, deg, g))) = heap.pop() {
        if done[g] || deg != adj[g].len() {
            continue;
        }
        done[g] = true;
        order.extend_from_slice(&members[g]);
        let nbrs: Vec<usize> = adj[g].drain().collect();
        for &u in &nbrs {
            adj[u].remove(&g);
            for &w in &nbrs {
                if w != u {
                    adj[u].insert(w);
                }
            }
        }
        for &u in &nbrs {
            heap.push(Reverse((deferred[u], adj[u].len(), u)));
        }
    }
    order
}

/// `P A Pᵀ = L D Lᵀ` with unit lower-triangular `L` stored by columns.
#[derive(Clone, Debug)]
pub struct LdlFactor {
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl LdlFactor {
    /// Factors the symmetric matrix `a` (both triangles or only one may be
    /// stored; entries are read from whichever lands in the upper triangle of
    /// the permuted matrix, so storing both triangles is the safe choice).
    ///
    /// `perm[k]` is the original variable eliminated at step `k`.
    pub fn factor(a: &CsMat<f64>, perm: &[usize], rule: &PivotRule) -> Result<Self, LdlError> {
        let n = perm.len();
        if a.rows() != n || a.cols() != n {
            return Err(LdlError::DimensionMismatch {
                rows: a.rows(),
                cols: a.cols(),
                expected: n,
            });
        }
        let mut iperm = vec![0usize; n];
        for (k, &v) in perm.iter().enumerate() {
            iperm[v] = k;
        }

        // Upper triangle of the permuted matrix, by column; symmetric
        // duplicates from a full-storage input are dropped by keeping only the
        // entries stored with original row <= original col when both appear.
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let full = is_full_symmetric_storage(a);
        for (&v, (r, c)) in a.iter() {
            if full && r > c {
                continue;
            }
            let (pr, pc) = (iperm[r], iperm[c]);
            let (i, j) = if pr <= pc { (pr, pc) } else { (pc, pr) };
            cols[j].push((i, v));
        }

        // Elimination tree and column counts.
        let mut parent = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            flag[k] = k;
            for &(i0, _) in &cols[k] {
                let mut i = i0;
                if i >= k {
                    continue;
                }
                while flag[i] != k {
                    if parent[i] == usize::MAX {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        let nnz = lp[n];
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0; nnz];
        let mut d = vec![0.0; n];

        // Numeric factorization, one row of L per step.
        let mut y = vec![0.0; n];
        let mut pattern = vec![0usize; n];
        lnz.iter_mut().for_each(|c| *c = 0);
        flag.iter_mut().for_each(|f| *f = usize::MAX);
        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            for &(i0, v) in &cols[k] {
                y[i0] += v;
                let mut i = i0;
                let mut len = 0;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = parent[i];
                }
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for &i in &pattern[top..n] {
                let yi = y[i];
                y[i] = 0.0;
                let start = lp[i];
                for p in start..start + lnz[i] {
                    y[li[p]] -= lx[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                let p = start + lnz[i];
                li[p] = k;
                lx[p] = l_ki;
                lnz[i] += 1;
            }
            if !rule.accepts(perm[k], d[k]) {
                return Err(LdlError::BadPivot {
                    variable: perm[k],
                    pivot: d[k],
                });
            }
        }

        Ok(Self {
            perm: perm.to_vec(),
            lp,
            li,
            lx,
            d,
        })
    }

    pub fn order(&self) -> usize {
        self.perm.len()
    }

    pub fn nnz_l(&self) -> usize {
        self.lp[self.order()]
    }

    /// Number of positive and negative pivots.
    pub fn inertia(&self) -> (usize, usize) {
        let pos = self.d.iter().filter(|&&d| d > 0.0).count();
        (pos, self.d.len() - pos)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.order();
        assert_eq!(b.len(), n, "right-hand side length");
        let mut y: Vec<f64> = self.perm.iter().map(|&v| b[v]).collect();
        for j in 0..n {
            let yj = y[j];
            for p in self.lp[j]..self.lp[j + 1] {
                y[self.li[p]] -= self.lx[p] * yj;
            }
        }
        for (yj, dj) in y.iter_mut().zip(&self.d) {
            *yj /= dj;
        }
        for j in (0..n).rev() {
            let mut acc = y[j];
            for p in self.lp[j]..self.lp[j + 1] {
                acc -= self.lx[p] * y[self.li[p]];
            }
            y[j] = acc;
        }
        let mut x = vec![0.0; n];
        for (k, &v) in self.perm.iter().enumerate() {
            x[v] = y[k];
        }
        x
    }
}

// Full storage is assumed when any strictly-lower entry is present.
fn is_full_symmetric_storage(a: &CsMat<f64>) -> bool {
    a.iter().any(|(_, (r, c))| r > c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sprs::TriMat;

    fn from_dense(m: &[&[f64]]) -> CsMat<f64> {
        let n = m.len();
        let mut t = TriMat::new((n, n));
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    t.add_triplet(i, j, v);
                }
            }
        }
        t.to_csc()
    }

    fn residual(m: &[&[f64]], x: &[f64], b: &[f64]) -> f64 {
        m.iter()
            .zip(b)
            .map(|(row, bi)| (row.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() - bi).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn spd_solve() {
        let m: [&[f64]; 3] = [&[4.0, 1.0, 0.0], &[1.0, 3.0, -1.0], &[0.0, -1.0, 2.0]];
        let a = from_dense(&m);
        let perm = minimum_degree_order(&a, &[0, 1, 2], &[false; 3]);
        let f = LdlFactor::factor(&a, &perm, &PivotRule::positive_definite(&a, 1e-12)).unwrap();
        let b = [1.0, 2.0, 3.0];
        let x = f.solve(&b);
        assert!(residual(&m, &x, &b) < 1e-14);
        assert_eq!(f.inertia(), (3, 0));
    }

    #[test]
    fn saddle_point_with_deferred_constraint() {
        // [2 0 1; 0 2 1; 1 1 0]: min x0^2 + x1^2 s.t. x0 + x1 = b
        let m: [&[f64]; 3] = [&[2.0, 0.0, 1.0], &[0.0, 2.0, 1.0], &[1.0, 1.0, 0.0]];
        let a = from_dense(&m);
        let perm = minimum_degree_order(&a, &[0, 1, 2], &[false, false, true]);
        assert_eq!(perm[2], 2);
        let rule = PivotRule {
            signs: vec![1, 1, -1],
            scale: vec![2.0, 2.0, 1.0],
            rel_tol: 1e-12,
        };
        let f = LdlFactor::factor(&a, &perm, &rule).unwrap();
        let b = [0.0, 0.0, 2.0];
        let x = f.solve(&b);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
        assert!(residual(&m, &x, &b) < 1e-14);
        assert_eq!(f.inertia(), (2, 1));
    }

    #[test]
    fn zero_column_is_rejected() {
        let m: [&[f64]; 2] = [&[1.0, 0.0], &[0.0, 0.0]];
        let a = from_dense(&m);
        let err =
            LdlFactor::factor(&a, &[0, 1], &PivotRule::positive_definite(&a, 1e-12)).unwrap_err();
        assert!(matches!(err, LdlError::BadPivot { variable: 1, .. }));
    }

    #[test]
    fn rank_deficient_spd_is_rejected() {
        let m: [&[f64]; 2] = [&[1.0, 1.0], &[1.0, 1.0]];
        let a = from_dense(&m);
        assert!(LdlFactor::factor(&a, &[0, 1], &PivotRule::positive_definite(&a, 1e-12)).is_err());
    }

    #[test]
    fn groups_stay_contiguous() {
        // path graph 0-1-2-3 with groups {0,3} {1} {2}
        let m: [&[f64]; 4] = [
            &[2.0, -1.0, 0.0, 0.0],
            &[-1.0, 2.0, -1.0, 0.0],
            &[0.0, -1.0, 2.0, -1.0],
            &[0.0, 0.0, -1.0, 2.0],
        ];
        let a = from_dense(&m);
        let order = minimum_degree_order(&a, &[0, 1, 2, 0], &[false; 3]);
        let pos0 = order.iter().position(|&v| v == 0).unwrap();
        assert_eq!(order[pos0 + 1], 3);
        let f = LdlFactor::factor(&a, &order, &PivotRule::positive_definite(&a, 1e-12)).unwrap();
        let b = [1.0, 0.0, 0.0, 1.0];
        assert!(residual(&m, &f.solve(&b), &b) < 1e-14);
    }
}
