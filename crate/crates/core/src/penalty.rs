//! Group-lasso penalties, their proximal maps and Bregman divergences.
//!
//! A [`Penalty`] is `lambda * sum_g |x^g|_2` over a partition of the tensor
//! coordinates. The per-element partition reduces it to the lasso.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupScheme {
    PerElement,
    /// One group per output filter of a `c_out x c_in x k x k` kernel.
    PerFilter,
}

/// Partition of a tensor's coordinates into disjoint groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    scheme: GroupScheme,
    shape: Vec<usize>,
    group_index: Vec<usize>,
    num_groups: usize,
}

impl Grouping {
    pub fn new(scheme: GroupScheme, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        match scheme {
            GroupScheme::PerElement => {
                Ok(Self { scheme, shape: shape.to_vec(), group_index: (0..len).collect(), num_groups: len })
            }
            GroupScheme::PerFilter => {
                if shape.len() != 4 {
                    return Err(Error::Grouping(format!(
                        "per-filter grouping needs a c_out x c_in x k x k kernel, got shape {shape:?}"
                    )));
                }
                let per_filter = len / shape[0];
                Ok(Self {
                    scheme,
                    shape: shape.to_vec(),
                    group_index: (0..len).map(|i| i / per_filter).collect(),
                    num_groups: shape[0],
                })
            }
        }
    }

    pub fn per_element(shape: &[usize]) -> Self {
        Self::new(GroupScheme::PerElement, shape).expect("per-element grouping accepts any shape")
    }

    pub fn per_filter(shape: &[usize]) -> Result<Self> {
        Self::new(GroupScheme::PerFilter, shape)
    }

    pub fn scheme(&self) -> GroupScheme {
        self.scheme
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn group_of(&self, coord: usize) -> usize {
        self.group_index[coord]
    }

    pub fn group_index(&self) -> &[usize] {
        &self.group_index
    }

    pub fn covers(&self, t: &Tensor) -> Result<()> {
        if t.shape() == self.shape.as_slice() {
            Ok(())
        } else {
            Err(Error::Grouping(format!(
                "grouping built for {:?} applied to tensor of shape {:?}",
                self.shape,
                t.shape()
            )))
        }
    }

    /// Euclidean norm of every group.
    pub fn group_norms(&self, t: &Tensor) -> Vec<f64> {
        let mut sq = vec![0.0; self.num_groups];
        for (&g, &v) in self.group_index.iter().zip(t.data()) {
            sq[g] += v * v;
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Per-group inner products `<a^g, b^g>`.
    pub fn group_dots(&self, a: &Tensor, b: &Tensor) -> Vec<f64> {
        let mut acc = vec![0.0; self.num_groups];
        for ((&g, &x), &y) in self.group_index.iter().zip(a.data()).zip(b.data()) {
            acc[g] += x * y;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub grouping: Grouping,
    pub lambda: f64,
}

impl Penalty {
    pub fn new(grouping: Grouping, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { grouping, lambda })
    }

    /// `lambda * sum_g |gamma^g|_2`
    pub fn value(&self, gamma: &Tensor) -> Result<f64> {
        self.grouping.covers(gamma)?;
        Ok(self.lambda * self.grouping.group_norms(gamma).iter().sum::<f64>())
    }

    /// `kappa * Prox_{Omega}(v)`: group soft-thresholding scaled by `kappa`.
    ///
    /// Groups with `|v^g| <= lambda` map to exact zeros.
    pub fn prox(&self, v: &Tensor, kappa: f64) -> Result<Tensor> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidArgument(format!("kappa must be > 0, got {kappa}")));
        }
        self.grouping.covers(v)?;
        Ok(self.shrink(v, self.lambda, kappa))
    }

    /// `argmin_x 1/2 |x - u|^2 + t * Omega(x)`, i.e. the prox of the scaled penalty.
    pub fn prox_scaled(&self, u: &Tensor, t: f64) -> Result<Tensor> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidArgument(format!("prox scale must be > 0, got {t}")));
        }
        self.grouping.covers(u)?;
        Ok(self.shrink(u, t * self.lambda, 1.0))
    }

    fn shrink(&self, v: &Tensor, threshold: f64, scale: f64) -> Tensor {
        let factors: Vec<f64> = self
            .grouping
            .group_norms(v)
            .into_iter()
            .map(|norm| if norm <= threshold || norm == 0.0 { 0.0 } else { scale * (1.0 - threshold / norm) })
            .collect();
        let mut out = v.clone();
        for (x, &g) in out.data_mut().iter_mut().zip(&self.grouping.group_index) {
            *x *= factors[g];
        }
        out
    }

    /// Largest group norm of `g`.
    pub fn dual_norm(&self, g: &Tensor) -> f64 {
        self.grouping.group_norms(g).into_iter().fold(0.0, f64::max)
    }

    /// True iff every group of `g` lies in the dual ball of radius `lambda + tol`.
    pub fn dual_feasible(&self, g: &Tensor, tol: f64) -> bool {
        self.dual_norm(g) <= self.lambda + tol
    }

    /// Worst violation of `g in dOmega(gamma)`: dual-ball excess, or on active groups
    /// the gap `lambda |gamma^g| - <g^g, gamma^g>` relative to `|gamma^g|`.
    pub fn subgradient_violation(&self, g: &Tensor, gamma: &Tensor) -> f64 {
        let g_norms = self.grouping.group_norms(g);
        let gamma_norms = self.grouping.group_norms(gamma);
        let dots = self.grouping.group_dots(g, gamma);
        let mut worst: f64 = 0.0;
        for ((&gn, &cn), &d) in g_norms.iter().zip(&gamma_norms).zip(&dots) {
            worst = worst.max(gn - self.lambda);
            if cn > 0.0 {
                worst = worst.max((self.lambda * cn - d).abs() / cn);
            }
        }
        worst
    }

    /// `B(gamma, gamma_ref) = Omega(gamma) - Omega(gamma_ref) - <g_ref, gamma - gamma_ref>`
    /// for a subgradient `g_ref` of `Omega` at `gamma_ref`. The subgradient test
    /// allows `1e-9 (1 + lambda) (1 + max |gamma_ref|)`, since a dual recovered as
    /// `V - Gamma / kappa` loses absolute precision as `Gamma` grows.
    pub fn bregman_div(&self, gamma: &Tensor, gamma_ref: &Tensor, g_ref: &Tensor) -> Result<f64> {
        self.grouping.covers(gamma)?;
        self.grouping.covers(gamma_ref)?;
        self.grouping.covers(g_ref)?;
        let violation = self.subgradient_violation(g_ref, gamma_ref);
        if violation > 1e-9 * (1.0 + self.lambda) * (1.0 + gamma_ref.max_abs()) {
            return Err(Error::Infeasible(format!(
                "reference dual is not a subgradient of the penalty (violation {violation:.3e})"
            )));
        }
        Ok(self.bregman_unchecked(gamma, gamma_ref, g_ref))
    }

    pub(crate) fn bregman_unchecked(&self, gamma: &Tensor, gamma_ref: &Tensor, g_ref: &Tensor) -> f64 {
        let omega = self.lambda * self.grouping.group_norms(gamma).iter().sum::<f64>();
        let omega_ref = self.lambda * self.grouping.group_norms(gamma_ref).iter().sum::<f64>();
        omega - omega_ref - g_ref.dot(&gamma.sub(gamma_ref))
    }
}

/// Proximal map of the penalty found by direct numerical minimisation of
/// `1/2 |x - v|^2 + Omega(x)`.
///
/// Each group's minimiser lies on the ray through `v^g`, so only its radius `r`
/// is searched: the one-sided derivative of `1/2 (r - |v^g|)^2 + lambda r` at 0
/// decides whether the group vanishes, otherwise the derivative's root is
/// bracketed in `[0, |v^g|]` and bisected to machine precision.
pub fn prox_oracle(v: &Tensor, p: &Penalty) -> Result<Tensor> {
    p.grouping.covers(v)?;
    let norms = p.grouping.group_norms(v);
    let radii: Vec<f64> = norms
        .iter()
        .map(|&norm| {
            let slope = |r: f64| (r - norm) + p.lambda;
            if norm == 0.0 || slope(0.0) >= 0.0 {
                return 0.0;
            }
            bisect_root(slope, 0.0, norm)
        })
        .collect();
    let mut out = v.clone();
    for (x, &g) in out.data_mut().iter_mut().zip(p.grouping.group_index()) {
        *x = if norms[g] == 0.0 { 0.0 } else { *x * radii[g] / norms[g] };
    }
    Ok(out)
}

/// Root of an increasing function with `f(lo) < 0 <= f(hi)`.
fn bisect_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_group(values: &[f64], lambda: f64) -> (Tensor, Penalty) {
        let t = Tensor::new(vec![1, values.len(), 1, 1], values.to_vec()).unwrap();
        let g = Grouping::per_filter(&[1, values.len(), 1, 1]).unwrap();
        (t, Penalty::new(g, lambda).unwrap())
    }

    #[test]
    fn value_examples() {
        let (z, p) = one_group(&[0.0, 0.0], 1.0);
        assert_eq!(p.value(&z).unwrap(), 0.0);
        let t = Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let p = Penalty::new(Grouping::per_filter(&[1, 2, 1, 1]).unwrap(), 1.0).unwrap();
        assert_eq!(p.value(&t).unwrap(), 5.0);
        let t = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let p = Penalty::new(Grouping::per_element(&[3]), 0.5).unwrap();
        assert_eq!(p.value(&t).unwrap(), 3.0);
    }

    #[test]
    fn grouping_mismatch_rejected() {
        let p = Penalty::new(Grouping::per_element(&[3]), 0.5).unwrap();
        assert!(p.value(&Tensor::zeros(&[4])).is_err());
        assert!(Grouping::per_filter(&[3, 4]).is_err());
    }

    #[test]
    fn per_filter_has_c_out_groups() {
        let g = Grouping::per_filter(&[8, 3, 3, 3]).unwrap();
        assert_eq!(g.num_groups(), 8);
        assert_eq!(g.group_of(26), 0);
        assert_eq!(g.group_of(27), 1);
    }

    #[test]
    fn prox_closed_form_example() {
        let t = Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let p = Penalty::new(Grouping::per_filter(&[1, 2, 1, 1]).unwrap(), 1.0).unwrap();
        let g = p.prox(&t, 1.0).unwrap();
        assert!((g.data()[0] - 2.4).abs() < 1e-15 && (g.data()[1] - 3.2).abs() < 1e-15);
        let o = prox_oracle(&t, &p).unwrap();
        assert!(o.max_abs_diff(&g) < 1e-8);
    }

    #[test]
    fn prox_threshold_and_identity() {
        let p = Penalty::new(Grouping::per_element(&[3]), 1.0).unwrap();
        let v = Tensor::from_vec(vec![1.0, -0.5, 0.0]);
        assert_eq!(p.prox(&v, 2.0).unwrap().data(), &[0.0, 0.0, 0.0]);
        let p0 = Penalty::new(Grouping::per_element(&[3]), 0.0).unwrap();
        let v = Tensor::from_vec(vec![1.0, -0.5, 2.0]);
        assert_eq!(p0.prox(&v, 3.0).unwrap(), v.scale(3.0));
        assert!(p.prox(&v, 0.0).is_err());
    }

    #[test]
    fn oracle_scalar_soft_threshold() {
        let p = Penalty::new(Grouping::per_element(&[1]), 1.0).unwrap();
        let o = prox_oracle(&Tensor::from_vec(vec![2.0]), &p).unwrap();
        assert!((o.data()[0] - 1.0).abs() < 1e-10);
        let o = prox_oracle(&Tensor::from_vec(vec![0.0]), &p).unwrap();
        assert_eq!(o.data()[0], 0.0);
    }

    #[test]
    fn dual_feasibility_examples() {
        let p = Penalty::new(Grouping::per_filter(&[1, 2, 1, 1]).unwrap(), 1.0).unwrap();
        assert!(p.dual_feasible(&Tensor::zeros(&[1, 2, 1, 1]), 0.0));
        let g = Tensor::new(vec![1, 2, 1, 1], vec![0.9, 1.2]).unwrap();
        assert!(!p.dual_feasible(&g, 0.0));
    }

    #[test]
    fn bregman_examples() {
        let p = Penalty::new(Grouping::per_element(&[1]), 1.0).unwrap();
        let b = p
            .bregman_div(&Tensor::from_vec(vec![2.0]), &Tensor::from_vec(vec![1.0]), &Tensor::from_vec(vec![1.0]))
            .unwrap();
        assert_eq!(b, 0.0);
        let x = Tensor::from_vec(vec![0.3]);
        assert_eq!(p.bregman_div(&x, &x, &Tensor::from_vec(vec![1.0])).unwrap(), 0.0);
        // 0.5 is not a subgradient at a positive point.
        assert!(p
            .bregman_div(&Tensor::from_vec(vec![2.0]), &Tensor::from_vec(vec![1.0]), &Tensor::from_vec(vec![0.5]))
            .is_err());
        assert!(p
            .bregman_div(&Tensor::from_vec(vec![2.0]), &Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![1.5]))
            .is_err());
    }
}
