//! Sparse matrices and truncated SVD.
//!
//! Small problems go through a dense SVD; large ones use seeded randomized
//! subspace iteration followed by a dense SVD of the projected matrix.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SvdError {
    #[error("requested rank {requested} outside 1..={max} for a {rows}x{cols} matrix")]
    RankOutOfRange {
        requested: usize,
        max: usize,
        rows: usize,
        cols: usize,
    },
    #[error("matrix has numerical rank {rank} < requested rank {requested}; use a smaller rank")]
    RankDeficient { rank: usize, requested: usize },
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) entries; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by_key(|e| (e.0, e.1));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            assert!(r < rows && c < cols, "entry ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut entries = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != 0.0 {
                    entries.push((r, c, m[(r, c)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), entries)
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// (column, value) pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut entries = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                entries.push((c, r, v));
            }
        }
        CsrMatrix::from_triplets(self.cols, self.rows, entries)
    }

    /// `self * x` for a dense `x`.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.cols, x.nrows());
        let mut out = DMatrix::zeros(self.rows, x.ncols());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                for k in 0..x.ncols() {
                    out[(r, k)] += v * x[(c, k)];
                }
            }
        }
        out
    }

    /// `selfᵀ * x` for a dense `x`.
    pub fn tr_mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.rows, x.nrows());
        let mut out = DMatrix::zeros(self.cols, x.ncols());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                for k in 0..x.ncols() {
                    out[(c, k)] += v * x[(r, k)];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvdOptions {
    pub seed: u64,
    /// Extra random directions for the randomized path.
    pub oversample: usize,
    pub power_iters: usize,
    /// Matrices with at most this many cells use the dense path.
    pub dense_limit: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        SvdOptions {
            seed: 0,
            oversample: 20,
            power_iters: 6,
            dense_limit: 4_000_000,
        }
    }
}

/// Rank-`d` factorization `M ≈ U diag(s) Vᵀ` with `s` non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

/// Top-`d` singular triplets of `m`.
pub fn truncated_svd(m: &CsrMatrix, d: usize, opts: &SvdOptions) -> Result<TruncatedSvd, SvdError> {
    let max = m.nrows().min(m.ncols());
    if d == 0 || d > max {
        return Err(SvdError::RankOutOfRange {
            requested: d,
            max,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let (u, s, v) = if m.nrows().saturating_mul(m.ncols()) <= opts.dense_limit {
        dense_svd(&m.to_dense())
    } else {
        randomized_svd(m, d, opts)
    };
    let order = descending_order(&s);
    let take: Vec<usize> = order.into_iter().take(d).collect();
    let mut out = TruncatedSvd {
        u: DMatrix::from_fn(u.nrows(), take.len(), |r, c| u[(r, take[c])]),
        s: take.iter().map(|&i| s[i]).collect(),
        v: DMatrix::from_fn(v.nrows(), take.len(), |r, c| v[(r, take[c])]),
    };
    let top = out.s[0];
    let tol = top * f64::EPSILON * m.nrows().max(m.ncols()) as f64;
    if top <= 0.0 || out.s[d - 1] <= tol {
        let rank = out.s.iter().filter(|&&x| x > tol).count();
        return Err(SvdError::RankDeficient { rank, requested: d });
    }
    fix_signs(&mut out);
    Ok(out)
}

fn descending_order(s: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order
}

/// Returns thin (U, s, V) with V as columns.
fn dense_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("U requested");
    let v = svd.v_t.expect("Vᵀ requested").transpose();
    (u, svd.singular_values.iter().copied().collect(), v)
}

fn orthonormal_basis(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

fn randomized_svd(m: &CsrMatrix, d: usize, opts: &SvdOptions) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let l = (d + opts.oversample).min(m.nrows().min(m.ncols()));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let omega = DMatrix::from_fn(m.ncols(), l, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormal_basis(m.mul_dense(&omega));
    for _ in 0..opts.power_iters {
        let z = orthonormal_basis(m.tr_mul_dense(&q));
        q = orthonormal_basis(m.mul_dense(&z));
    }
    // Bᵀ = Mᵀ Q is cols × l; its SVD W Σ Zᵀ gives M ≈ (Q Z) Σ Wᵀ.
    let bt = m.tr_mul_dense(&q);
    let (w, s, z) = dense_svd(&bt);
    (q * z, s, w)
}

/// Makes the largest-magnitude entry of each right singular vector positive.
fn fix_signs(svd: &mut TruncatedSvd) {
    for j in 0..svd.s.len() {
        let col = svd.v.column(j);
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            svd.v.column_mut(j).neg_mut();
            svd.u.column_mut(j).neg_mut();
        }
    }
}

/// Row-wise unit scaling. Rows with norm below `eps` are left at zero and
/// flagged.
pub fn normalize_rows(m: &mut DMatrix<f64>, eps: f64) -> Vec<bool> {
    let mut degenerate = vec![false; m.nrows()];
    for r in 0..m.nrows() {
        let norm = m.row(r).norm();
        if norm < eps {
            m.row_mut(r).fill(0.0);
            degenerate[r] = true;
        } else {
            m.row_mut(r).scale_mut(1.0 / norm);
        }
    }
    degenerate
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let id = CsrMatrix::from_dense(&DMatrix::identity(2, 2));
        let svd = truncated_svd(&id, 2, &SvdOptions::default()).unwrap();
        let utu = svd.u.transpose() * &svd.u;
        assert!((utu - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
        assert!((svd.reconstruct() - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn rank_errors() {
        let m = CsrMatrix::from_triplets(3, 3, vec![(0, 0, 1.0), (1, 0, 1.0)]);
        assert!(matches!(
            truncated_svd(&m, 2, &SvdOptions::default()),
            Err(SvdError::RankDeficient { rank: 1, requested: 2 })
        ));
        assert!(matches!(
            truncated_svd(&m, 4, &SvdOptions::default()),
            Err(SvdError::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn randomized_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut entries = Vec::new();
        for r in 0..60 {
            for c in 0..80 {
                let x: f64 = StandardNormal.sample(&mut rng);
                if x > 0.8 {
                    entries.push((r, c, 1.0));
                }
            }
        }
        let m = CsrMatrix::from_triplets(60, 80, entries);
        let dense = truncated_svd(&m, 5, &SvdOptions::default()).unwrap();
        let opts = SvdOptions {
            dense_limit: 0,
            ..SvdOptions::default()
        };
        let rand = truncated_svd(&m, 5, &opts).unwrap();
        for (a, b) in dense.s.iter().zip(&rand.s) {
            assert!((a - b).abs() < 1e-6 * a, "{a} vs {b}");
        }
    }

    #[test]
    fn csr_products() {
        let d = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let m = CsrMatrix::from_dense(&d);
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(m.mul_dense(&x), &d * &x);
        let y = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        assert_eq!(m.tr_mul_dense(&y), d.transpose() * &y);
        assert_eq!(m.transpose().to_dense(), d.transpose());
        assert_eq!(m.get(0, 2), 2.0);
    }
}
