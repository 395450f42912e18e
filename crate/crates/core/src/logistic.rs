//! L2-regularized logistic regression on standardized sparse features,
//! fitted by gradient descent with Barzilai-Borwein steps and Armijo
//! backtracking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sparse feature row: (column, value) pairs with distinct columns.
pub type SparseRow = Vec<(usize, f64)>;

#[derive(Debug, Error, PartialEq)]
pub enum LogisticError {
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("{rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("non-finite value in row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("row {row} references column {column} but dimension is {dim}")]
    ColumnOutOfRange { row: usize, column: usize, dim: usize },
    #[error("l2 strength must be finite and non-negative, got {0}")]
    BadL2(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the gradient infinity-norm falls below this.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            l2: 1.0,
            max_iters: 5000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Weights on standardized features.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub l2_strength: f64,
    pub mean: Vec<f64>,
    /// Population standard deviation; 0 marks an ignored column.
    pub std: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LogisticModel {
    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    fn raw_weights(&self) -> Vec<f64> {
        raw_weights(&self.weights, &self.std)
    }

    /// Σ wⱼ xⱼ / σⱼ over the row, without the centering offset or intercept.
    pub fn linear_score(&self, row: &[(usize, f64)]) -> f64 {
        let a = self.raw_weights();
        row.iter().map(|&(j, x)| a.get(j).map_or(0.0, |aj| aj * x)).sum()
    }

    pub fn decision(&self, row: &[(usize, f64)]) -> f64 {
        let a = self.raw_weights();
        let offset: f64 = self.mean.iter().zip(&a).map(|(m, aj)| m * aj).sum();
        self.intercept - offset + row.iter().map(|&(j, x)| a.get(j).map_or(0.0, |aj| aj * x)).sum::<f64>()
    }

    pub fn predict_proba(&self, row: &[(usize, f64)]) -> f64 {
        sigmoid(self.decision(row))
    }
}

fn raw_weights(w: &[f64], std: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(std)
        .map(|(w, s)| if *s > 0.0 { w / s } else { 0.0 })
        .collect()
}

/// Column means and population standard deviations. Columns whose spread is
/// negligible relative to their magnitude get σ = 0.
pub fn column_stats(rows: &[SparseRow], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut sum = vec![0.0; dim];
    let mut nnz = vec![0usize; dim];
    for r in rows {
        for &(j, x) in r {
            sum[j] += x;
            nnz[j] += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut ss = vec![0.0; dim];
    for r in rows {
        for &(j, x) in r {
            ss[j] += (x - mean[j]) * (x - mean[j]);
        }
    }
    let std = (0..dim)
        .map(|j| {
            let var = (ss[j] + (rows.len() - nnz[j]) as f64 * mean[j] * mean[j]) / n;
            let sd = var.max(0.0).sqrt();
            if sd <= 1e-12 * mean[j].abs().max(1.0) {
                0.0
            } else {
                sd
            }
        })
        .collect();
    (mean, std)
}

/// Regularized mean cross-entropy over standardized rows. Parameters are
/// laid out as `[w₀ … w_{d-1}, intercept]`.
pub struct Objective<'a> {
    rows: &'a [SparseRow],
    y: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
    l2: f64,
}

impl<'a> Objective<'a> {
    pub fn new(rows: &'a [SparseRow], y: &[bool], mean: Vec<f64>, std: Vec<f64>, l2: f64) -> Self {
        Objective {
            rows,
            y: y.iter().map(|&b| b as u8 as f64).collect(),
            mean,
            std,
            l2,
        }
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    fn margins(&self, params: &[f64]) -> Vec<f64> {
        let d = self.dimension();
        let a = raw_weights(&params[..d], &self.std);
        let offset: f64 = params[d] - self.mean.iter().zip(&a).map(|(m, aj)| m * aj).sum::<f64>();
        self.rows
            .iter()
            .map(|r| offset + r.iter().map(|&(j, x)| a[j] * x).sum::<f64>())
            .collect()
    }

    fn penalty(&self, params: &[f64]) -> f64 {
        let d = self.dimension();
        0.5 * self.l2 * params[..d].iter().map(|w| w * w).sum::<f64>()
    }

    pub fn value(&self, params: &[f64]) -> f64 {
        let z = self.margins(params);
        let n = z.len() as f64;
        let ce: f64 = z.iter().zip(&self.y).map(|(z, y)| softplus(*z) - y * z).sum();
        ce / n + self.penalty(params)
    }

    pub fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dimension();
        let z = self.margins(params);
        let n = z.len() as f64;
        let mut ce = 0.0;
        let mut resid_sum = 0.0;
        let mut xr = vec![0.0; d];
        for ((zi, yi), row) in z.iter().zip(&self.y).zip(self.rows) {
            ce += softplus(*zi) - yi * zi;
            let r = sigmoid(*zi) - yi;
            resid_sum += r;
            for &(j, x) in row {
                xr[j] += r * x;
            }
        }
        let gb = resid_sum / n;
        let mut grad = vec![0.0; d + 1];
        for j in 0..d {
            if self.std[j] > 0.0 {
                grad[j] = (xr[j] / n - self.mean[j] * gb) / self.std[j] + self.l2 * params[j];
            }
        }
        grad[d] = gb;
        (ce / n + self.penalty(params), grad)
    }
}

fn validate(rows: &[SparseRow], dim: usize, y: &[bool], l2: f64) -> Result<(), LogisticError> {
    if rows.len() != y.len() {
        return Err(LogisticError::LengthMismatch {
            rows: rows.len(),
            labels: y.len(),
        });
    }
    if rows.len() < 2 {
        return Err(LogisticError::TooFewRows(rows.len()));
    }
    if y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
        return Err(LogisticError::SingleClass);
    }
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(LogisticError::BadL2(l2));
    }
    for (i, r) in rows.iter().enumerate() {
        for &(j, x) in r {
            if j >= dim {
                return Err(LogisticError::ColumnOutOfRange { row: i, column: j, dim });
            }
            if !x.is_finite() {
                return Err(LogisticError::NonFinite { row: i, column: j });
            }
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn fit_logistic(
    rows: &[SparseRow],
    dim: usize,
    y: &[bool],
    opts: &FitOptions,
) -> Result<LogisticModel, LogisticError> {
    fit_logistic_traced(rows, dim, y, opts).map(|(m, _)| m)
}

/// Like [`fit_logistic`], also returning the objective after every accepted
/// step (starting from the all-zero initial point).
pub fn fit_logistic_traced(
    rows: &[SparseRow],
    dim: usize,
    y: &[bool],
    opts: &FitOptions,
) -> Result<(LogisticModel, Vec<f64>), LogisticError> {
    validate(rows, dim, y, opts.l2)?;
    let (mean, std) = column_stats(rows, dim);
    let obj = Objective::new(rows, y, mean, std, opts.l2);

    let mut params = vec![0.0; dim + 1];
    let (mut f, mut g) = obj.value_and_gradient(&params);
    let mut trace = vec![f];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let gg = dot(&g, &g);
        let mut cand;
        let mut fc;
        loop {
            cand = params.iter().zip(&g).map(|(p, gi)| p - step * gi).collect::<Vec<_>>();
            fc = obj.value(&cand);
            if fc <= f - 1e-4 * step * gg {
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                break;
            }
        }
        if !(fc <= f) {
            log::warn!("logistic line search stalled at iteration {iterations}");
            break;
        }
        let (fc, gc) = obj.value_and_gradient(&cand);
        let s: Vec<f64> = cand.iter().zip(&params).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        step = if sy > 0.0 { (dot(&s, &s) / sy).clamp(1e-10, 1e10) } else { 1.0 };
        params = cand;
        f = fc;
        g = gc;
        trace.push(f);
    }
    if !converged && g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.tolerance {
        converged = true;
    }
    if !converged {
        log::warn!("logistic regression did not converge in {} iterations", opts.max_iters);
    }

    let intercept = params[dim];
    params.truncate(dim);
    Ok((
        LogisticModel {
            weights: params,
            intercept,
            l2_strength: opts.l2,
            mean: obj.mean,
            std: obj.std,
            iterations,
            converged,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_features_give_even_odds() {
        let rows = vec![Vec::new(); 4];
        let y = [true, false, true, false];
        let m = fit_logistic(&rows, 3, &y, &FitOptions::default()).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        assert!(m.intercept.abs() < 1e-12);
        assert!((m.predict_proba(&[]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        let rows = vec![vec![(0, 1.0)], vec![(0, 2.0)]];
        assert_eq!(
            fit_logistic(&rows, 1, &[true, true], &FitOptions::default()),
            Err(LogisticError::SingleClass)
        );
        let bad = vec![vec![(0, 1.0)], vec![(1, f64::NAN)]];
        assert_eq!(
            fit_logistic(&bad, 2, &[true, false], &FitOptions::default()),
            Err(LogisticError::NonFinite { row: 1, column: 1 })
        );
        assert!(matches!(
            fit_logistic(&rows[..1], 1, &[true], &FitOptions::default()),
            Err(LogisticError::TooFewRows(1))
        ));
    }

    #[test]
    fn zero_variance_column_is_ignored() {
        let rows = vec![vec![(0, 1.0), (1, 3.0)], vec![(0, -1.0), (1, 3.0)]];
        let m = fit_logistic(&rows, 2, &[true, false], &FitOptions::default()).unwrap();
        assert_eq!(m.std[1], 0.0);
        assert_eq!(m.weights[1], 0.0);
        assert!(m.weights[0] > 0.0);
    }

    #[test]
    fn one_dimensional_oracle() {
        // With b = 0 by symmetry the optimum solves w = 1 / (1 + e^w).
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid - 1.0 / (1.0 + mid.exp()) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let rows = vec![vec![(0, -1.0)], vec![(0, 1.0)]];
        let opts = FitOptions { l2: 1.0, max_iters: 10_000, tolerance: 1e-12 };
        let m = fit_logistic(&rows, 1, &[false, true], &opts).unwrap();
        assert!(m.converged);
        assert!((m.weights[0] - oracle).abs() < 1e-6, "{} vs {oracle}", m.weights[0]);
        assert!(m.intercept.abs() < 1e-9);
    }

    #[test]
    fn large_penalty_shrinks_weights() {
        let rows: Vec<SparseRow> = (0..10).map(|i| vec![(0, i as f64)]).collect();
        let y: Vec<bool> = (0..10).map(|i| i >= 5).collect();
        let m = fit_logistic(&rows, 1, &y, &FitOptions { l2: 1e8, ..Default::default() }).unwrap();
        assert!(m.weights[0].abs() < 1e-7);
    }
}
