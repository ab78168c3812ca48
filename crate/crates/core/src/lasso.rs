//! Cyclic coordinate-descent lasso and its regularization path.
//!
//! Solves `min_b |y - X b|^2 / (2n) + lambda |b|_1` and stops on the duality gap.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coefficients along a decreasing grid of penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    pub coefs: Vec<Vec<f64>>,
}

fn design(x: &Tensor, y: &Tensor) -> Result<(usize, usize)> {
    if x.shape().len() != 2 {
        return Err(Error::Shape(format!("design must be 2-D, got {:?}", x.shape())));
    }
    let (n, p) = (x.shape()[0], x.shape()[1]);
    if y.len() != n {
        return Err(Error::Shape(format!("{n} design rows but {} targets", y.len())));
    }
    Ok((n, p))
}

/// Smallest penalty at which the solution is identically zero: `|X^T y|_inf / n`.
pub fn lambda_max(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, p) = design(x, y)?;
    let mut best: f64 = 0.0;
    for j in 0..p {
        let c: f64 = (0..n).map(|i| x.data()[i * p + j] * y.data()[i]).sum();
        best = best.max(c.abs());
    }
    Ok(best / n as f64)
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Duality gap of `b` with residual `r = y - X b`.
fn duality_gap(x: &Tensor, y: &Tensor, b: &[f64], r: &[f64], lambda: f64) -> f64 {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let nf = n as f64;
    let mut corr: f64 = 0.0;
    for j in 0..p {
        let c: f64 = (0..n).map(|i| x.data()[i * p + j] * r[i]).sum();
        corr = corr.max(c.abs());
    }
    let scale = if corr > nf * lambda { nf * lambda / corr } else { 1.0 };
    let r_sq: f64 = r.iter().map(|v| v * v).sum();
    let primal = r_sq / (2.0 * nf) + lambda * b.iter().map(|v| v.abs()).sum::<f64>();
    let theta_y: f64 = r.iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>() * scale;
    let dual = (theta_y - 0.5 * scale * scale * r_sq) / nf;
    primal - dual
}

/// Solves the lasso at one penalty, warm-started from `start`. Iterates full
/// coordinate sweeps until the duality gap is at most `tol * |y|^2 / (2n)`.
pub fn lasso_cd(x: &Tensor, y: &Tensor, lambda: f64, start: &[f64], tol: f64, max_sweeps: usize) -> Result<Vec<f64>> {
    let (n, p) = design(x, y)?;
    if start.len() != p {
        return Err(Error::Shape(format!("warm start has {} coefficients, design has {p}", start.len())));
    }
    if !(lambda >= 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("need lambda >= 0 and tol > 0, got {lambda}, {tol}")));
    }
    let nf = n as f64;
    let xd = x.data();
    let col_sq: Vec<f64> = (0..p).map(|j| (0..n).map(|i| xd[i * p + j].powi(2)).sum::<f64>() / nf).collect();
    let mut b = start.to_vec();
    let mut r: Vec<f64> = (0..n).map(|i| y.data()[i] - (0..p).map(|j| xd[i * p + j] * b[j]).sum::<f64>()).collect();
    let scale = y.norm_sq() / (2.0 * nf);
    let target = tol * scale.max(f64::MIN_POSITIVE);
    for _ in 0..max_sweeps {
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let rho: f64 = (0..n).map(|i| xd[i * p + j] * r[i]).sum::<f64>() / nf + col_sq[j] * b[j];
            let new = soft(rho, lambda) / col_sq[j];
            let delta = new - b[j];
            if delta != 0.0 {
                for i in 0..n {
                    r[i] -= delta * xd[i * p + j];
                }
                b[j] = new;
            }
        }
        if duality_gap(x, y, &b, &r, lambda) <= target {
            return Ok(b);
        }
    }
    Err(Error::InvalidArgument(format!(
        "coordinate descent did not reach gap {tol:e} in {max_sweeps} sweeps at lambda {lambda:e}"
    )))
}

/// Lasso path on `num` log-spaced penalties from `lambda_max` down to `ratio * lambda_max`.
pub fn lasso_path(x: &Tensor, y: &Tensor, num: usize, ratio: f64, tol: f64) -> Result<LassoPath> {
    if num < 2 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("need >= 2 grid points and ratio in (0, 1), got {num}, {ratio}")));
    }
    let (_, p) = design(x, y)?;
    let top = lambda_max(x, y)?;
    let lambdas: Vec<f64> = (0..num).map(|k| top * ratio.powf(k as f64 / (num - 1) as f64)).collect();
    let mut coefs = Vec::with_capacity(num);
    let mut warm = vec![0.0; p];
    for &lam in &lambdas {
        warm = lasso_cd(x, y, lam, &warm, tol, 100_000)?;
        coefs.push(warm.clone());
    }
    Ok(LassoPath { lambdas, coefs })
}

impl LassoPath {
    /// Grid index at which each coefficient first becomes nonzero.
    pub fn entry_order(&self) -> Vec<Option<usize>> {
        let p = self.coefs.first().map_or(0, Vec::len);
        (0..p).map(|j| self.coefs.iter().position(|c| c[j] != 0.0)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_design_is_soft_thresholding() {
        // X^T X / n = I, so b_j = soft(X_j^T y / n, lambda).
        let x = Tensor::new(vec![2, 2], vec![2f64.sqrt(), 0.0, 0.0, 2f64.sqrt()]).unwrap();
        let y = Tensor::new(vec![2, 1], vec![3.0 * 2f64.sqrt(), -0.5 * 2f64.sqrt()]).unwrap();
        let b = lasso_cd(&x, &y, 1.0, &[0.0, 0.0], 1e-12, 100).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && b[1] == 0.0, "{b:?}");
    }

    #[test]
    fn lambda_max_zeroes_everything() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.3, 1.0]).unwrap();
        let y = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let top = lambda_max(&x, &y).unwrap();
        let b = lasso_cd(&x, &y, top, &[0.0, 0.0], 1e-10, 100).unwrap();
        assert!(b.iter().all(|v| *v == 0.0));
        let path = lasso_path(&x, &y, 10, 1e-3, 1e-10).unwrap();
        assert_eq!(path.lambdas.len(), 10);
        assert!(path.entry_order().iter().all(|e| e.is_some()));
    }
}
