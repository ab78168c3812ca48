//! Runtime checks of the convergence theory along a deterministic, full-batch,
//! naive run.
//!
//! With `P_k = (W_k, Gamma_k)`, dual iterate `g_k = V_k - Gamma_k / kappa` and
//! `Q_k = (P_k, g_{k-1})`, the Lyapunov function is
//! `F(Q_k) = alpha Lbar(P_k) + B^{g_{k-1}}(Gamma_k, Gamma_{k-1})`. Along the
//! iteration it must satisfy
//!
//! * sufficient descent: `F(Q_{k+1}) <= F(Q_k) - rho |Q_{k+1} - Q_k|^2`,
//!   `rho = 1/kappa - alpha (Lip + 1/nu) / 2`;
//! * relative error: `|H_{k+1}| <= rho1 |Q_{k+1} - Q_k|`,
//!   `rho1 = 2/kappa + 1 + alpha (Lip + 2/nu)`, with `H_{k+1}` the subgradient
//!   of `F` at `Q_{k+1}`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;
use crate::optim::{AugmentedGrads, HyperParams, OptimizerState, Variant};
use crate::penalty::Penalty;
use crate::tensor::Tensor;

/// Relative slack absorbing floating-point rounding in both inequalities.
pub const DEFAULT_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub lip: f64,
    /// Inequalities are accepted up to `slack * (1 + |F_k|)`.
    pub slack: f64,
    /// Keep monitoring when `rho <= 0` instead of rejecting the run. The descent
    /// test then clamps `rho` to 0 and only asks for `F` to be nonincreasing;
    /// meant for negative controls with deliberately oversized steps.
    pub allow_nonpositive_rho: bool,
}

impl MonitorConfig {
    pub fn new(lip: f64) -> Self {
        Self { lip, slack: DEFAULT_SLACK, allow_nonpositive_rho: false }
    }

    pub fn negative_control(lip: f64) -> Self {
        Self { allow_nonpositive_rho: true, ..Self::new(lip) }
    }

    fn effective_rho(&self, hp: &HyperParams, alpha: f64) -> Result<f64> {
        let r = rho(hp, alpha, self.lip);
        if r > 0.0 {
            Ok(r)
        } else if self.allow_nonpositive_rho {
            Ok(0.0)
        } else {
            Err(Error::InvalidArgument(format!(
                "rho = {r:.3e} <= 0: step size {alpha} is not below the convergence bound"
            )))
        }
    }
}

/// `1/kappa - alpha (lip + 1/nu) / 2`
pub fn rho(hp: &HyperParams, alpha: f64, lip: f64) -> f64 {
    1.0 / hp.kappa - alpha * (lip + 1.0 / hp.nu) / 2.0
}

/// `2/kappa + 1 + alpha (lip + 2/nu)`
pub fn rho1(hp: &HyperParams, alpha: f64, lip: f64) -> f64 {
    2.0 / hp.kappa + 1.0 + alpha * (lip + 2.0 / hp.nu)
}

/// Whether the theory covers this run: naive variant, full batch, smooth network.
pub fn applicable(net: &Network, hp: &HyperParams, full_batch: bool) -> bool {
    hp.variant == Variant::Naive && full_batch && net.is_smooth()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovRecord {
    pub k: usize,
    pub alpha: f64,
    /// `F(Q_k)` evaluated with the step size of the step that produced it.
    pub f: f64,
    /// `alpha Lbar(P_k)`
    pub scaled_loss: f64,
    pub delta_p: f64,
    pub delta_q: f64,
    pub h_norm: f64,
    pub rho: f64,
    pub rho1: f64,
    pub descent_ok: bool,
    /// The same descent test measured with `|P_{k+1} - P_k|` in place of
    /// `|Q_{k+1} - Q_k|`; the dual component is left out.
    pub descent_p_ok: bool,
    pub relerr_ok: bool,
    /// `max_g |g_k^g| - lambda` over split weights.
    pub dual_excess: f64,
}

/// `F = alpha Lbar(W, Gamma) + sum_l B^{g_prev}(Gamma, Gamma_prev)`, with the
/// plain loss evaluated on the supplied batch.
pub fn lyapunov_f(
    state: &OptimizerState,
    gamma_prev: &[Tensor],
    g_prev: &[Tensor],
    hp: &HyperParams,
    alpha: f64,
    x: &Tensor,
    y: &Tensor,
) -> Result<f64> {
    let (loss, _) = state.net.forward(x, y)?;
    let mut breg = 0.0;
    let split: Vec<_> = state.split_params().collect();
    if split.len() != gamma_prev.len() || split.len() != g_prev.len() {
        return Err(Error::Shape(format!(
            "{} split weights but {} previous Gamma / {} previous duals",
            split.len(),
            gamma_prev.len(),
            g_prev.len()
        )));
    }
    for (((_, c), gp), dp) in split.into_iter().zip(gamma_prev).zip(g_prev) {
        breg += c.penalty.bregman_div(&c.gamma, gp, dp)?;
    }
    Ok(alpha * state.augmented_loss(loss, hp.nu) + breg)
}

/// `F_{k+1} <= F_k - rho |Q_{k+1} - Q_k|^2 + slack (1 + |F_k|)`.
pub fn check_sufficient_descent(
    f_k: f64,
    f_k1: f64,
    delta_q: f64,
    hp: &HyperParams,
    alpha: f64,
    cfg: &MonitorConfig,
) -> Result<bool> {
    let r = cfg.effective_rho(hp, alpha)?;
    Ok(f_k1 <= f_k - r * delta_q * delta_q + cfg.slack * (1.0 + f_k.abs()))
}

/// `|H_{k+1}| <= rho1 |Q_{k+1} - Q_k| + slack (1 + |F_k|)`.
pub fn check_relative_error(
    h_norm: f64,
    delta_q: f64,
    f_k: f64,
    hp: &HyperParams,
    alpha: f64,
    cfg: &MonitorConfig,
) -> Result<bool> {
    cfg.effective_rho(hp, alpha)?;
    Ok(h_norm <= rho1(hp, alpha, cfg.lip) * delta_q + cfg.slack * (1.0 + f_k.abs()))
}

/// `(1/K) sum_{k<K} |P_{k+1} - P_k|^2` from the first `K` recorded steps.
pub fn check_rate(records: &[LyapunovRecord], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("rate needs K >= 2, got {k}")));
    }
    if records.len() <= k {
        return Err(Error::InvalidArgument(format!(
            "rate over K = {k} needs {} records, have {}",
            k + 1,
            records.len()
        )));
    }
    Ok(records[1..=k].iter().map(|r| r.delta_p * r.delta_p).sum::<f64>() / k as f64)
}

/// The constant `C = alpha Lbar(P_0) / rho` of the `C / K` rate bound.
pub fn rate_constant(records: &[LyapunovRecord]) -> Option<f64> {
    let first = records.first()?;
    let second = records.get(1)?;
    Some(first.scaled_loss / first.alpha * second.alpha / second.rho)
}

#[derive(Debug, Clone)]
struct Snapshot {
    weights: Vec<Tensor>,
    gammas: Vec<Tensor>,
    duals: Vec<Tensor>,
    /// `g_{k-1}`, the dual component of `Q_k`.
    dual_prev: Vec<Tensor>,
    aug_loss: f64,
    bregman: f64,
}

/// Sequential consumer of iterates; call [`Monitor::observe`] at every iterate
/// with the gradients that will drive the next step.
#[derive(Debug, Clone)]
pub struct Monitor {
    cfg: MonitorConfig,
    prev: Option<Snapshot>,
    records: Vec<LyapunovRecord>,
    diverged: Option<String>,
}

impl Monitor {
    pub fn new(cfg: MonitorConfig) -> Result<Self> {
        if !(cfg.lip > 0.0 && cfg.lip.is_finite()) {
            return Err(Error::InvalidArgument(format!("Lipschitz estimate must be > 0, got {}", cfg.lip)));
        }
        if !(cfg.slack >= 0.0) {
            return Err(Error::InvalidArgument("descent slack must be >= 0".into()));
        }
        Ok(Self { cfg, prev: None, records: Vec::new(), diverged: None })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[LyapunovRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<LyapunovRecord> {
        self.records
    }

    /// Set when a monitored run stopped early on a non-finite loss or gradient.
    pub fn diverged(&self) -> Option<&str> {
        self.diverged.as_deref()
    }

    pub fn violations(&self) -> usize {
        self.records.iter().filter(|r| !r.descent_ok || !r.relerr_ok).count()
    }

    /// Records iterate `k`. `grads` are the augmented gradients at this iterate and
    /// `alpha` the step size that produced it (the first step's size at `k = 0`).
    pub fn observe(
        &mut self,
        state: &OptimizerState,
        grads: &AugmentedGrads,
        hp: &HyperParams,
        alpha: f64,
    ) -> Result<&LyapunovRecord> {
        let kappa = hp.kappa;
        let split: Vec<_> = state.split_params().collect();
        let penalties: Vec<&Penalty> = split.iter().map(|(_, c)| &c.penalty).collect();
        let weights: Vec<Tensor> = state.params.iter().map(|p| state.net.param(p.id).clone()).collect();
        let gammas: Vec<Tensor> = split.iter().map(|(_, c)| c.gamma.clone()).collect();
        let duals: Vec<Tensor> = split.iter().map(|(_, c)| c.dual(kappa)).collect();
        let aug_loss = state.augmented_loss(grads.loss, hp.nu);

        let (gamma_prev, dual_prev): (Vec<Tensor>, Vec<Tensor>) = match &self.prev {
            Some(p) => (p.gammas.clone(), p.duals.clone()),
            None => (
                gammas.iter().map(|g| Tensor::zeros(g.shape())).collect(),
                gammas.iter().map(|g| Tensor::zeros(g.shape())).collect(),
            ),
        };
        let mut bregman = 0.0;
        for ((p, (g, gp)), dp) in penalties.iter().zip(gammas.iter().zip(&gamma_prev)).zip(&dual_prev) {
            bregman += p.bregman_div(g, gp, dp)?;
        }
        let f = alpha * aug_loss + bregman;
        let dual_excess =
            penalties.iter().zip(&duals).map(|(p, d)| p.dual_norm(d) - p.lambda).fold(f64::NEG_INFINITY, f64::max);
        let r = rho(hp, alpha, self.cfg.lip);
        let r1 = rho1(hp, alpha, self.cfg.lip);

        let record = match &self.prev {
            None => LyapunovRecord {
                k: 0,
                alpha,
                f,
                scaled_loss: alpha * aug_loss,
                delta_p: 0.0,
                delta_q: 0.0,
                h_norm: 0.0,
                rho: r,
                rho1: r1,
                descent_ok: true,
                descent_p_ok: true,
                relerr_ok: true,
                dual_excess,
            },
            Some(prev) => {
                let dp_sq: f64 = weights.iter().zip(&prev.weights).map(|(a, b)| a.sub(b).norm_sq()).sum::<f64>()
                    + gammas.iter().zip(&prev.gammas).map(|(a, b)| a.sub(b).norm_sq()).sum::<f64>();
                // Q_k carries g_{k-1}; Q_{k-1} carries g_{k-2}.
                let dg_sq: f64 = dual_prev.iter().zip(&prev.dual_prev).map(|(a, b)| a.sub(b).norm_sq()).sum();
                let delta_p = dp_sq.sqrt();
                let delta_q = (dp_sq + dg_sq).sqrt();

                let mut h_sq = 0.0;
                for gw in &grads.w {
                    h_sq += alpha * alpha * gw.norm_sq();
                }
                for (i, gg) in grads.gamma.iter().flatten().enumerate() {
                    let mut part = gg.scale(alpha);
                    part.axpy(1.0, &duals[i]);
                    part.axpy(-1.0, &prev.duals[i]);
                    h_sq += part.norm_sq();
                    h_sq += prev.gammas[i].sub(&gammas[i]).norm_sq();
                }
                let h_norm = h_sq.sqrt();
                let f_prev = alpha * prev.aug_loss + prev.bregman;
                LyapunovRecord {
                    k: self.records.len(),
                    alpha,
                    f,
                    scaled_loss: alpha * aug_loss,
                    delta_p,
                    delta_q,
                    h_norm,
                    rho: r,
                    rho1: r1,
                    descent_ok: check_sufficient_descent(f_prev, f, delta_q, hp, alpha, &self.cfg)?,
                    descent_p_ok: check_sufficient_descent(f_prev, f, delta_p, hp, alpha, &self.cfg)?,
                    relerr_ok: check_relative_error(h_norm, delta_q, f_prev, hp, alpha, &self.cfg)?,
                    dual_excess,
                }
            }
        };
        self.prev = Some(Snapshot { weights, gammas, duals, dual_prev, aug_loss, bregman });
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_monitor_csv(&self.records, out)
    }
}

/// Columns: `k,F,delta_Q,H_norm,rho,rho1,descent_ok,relerr_ok`.
pub fn write_monitor_csv<W: Write>(records: &[LyapunovRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "F", "delta_Q", "H_norm", "rho", "rho1", "descent_ok", "relerr_ok"])?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            format!("{:e}", r.f),
            format!("{:e}", r.delta_q),
            format!("{:e}", r.h_norm),
            format!("{:e}", r.rho),
            format!("{:e}", r.rho1),
            r.descent_ok.to_string(),
            r.relerr_ok.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("monitor csv", e))?;
    Ok(())
}

/// Runs `steps` full-batch naive steps at constant `alpha` under the monitor.
/// A non-finite loss or gradient ends the run early; the records gathered so far
/// are kept and [`Monitor::diverged`] reports the cause.
pub fn run_monitored(
    state: &mut OptimizerState,
    x: &Tensor,
    y: &Tensor,
    hp: &HyperParams,
    cfg: MonitorConfig,
    steps: usize,
) -> Result<Monitor> {
    if hp.variant != Variant::Naive {
        return Err(Error::InvalidArgument("the monitor only covers the naive variant".into()));
    }
    if !state.net.is_smooth() {
        return Err(Error::InvalidArgument("the monitor needs a smooth network".into()));
    }
    let mut monitor = Monitor::new(cfg)?;
    let alpha = state.alpha;
    let mut grads = state.grad_augmented(x, y, hp.nu)?;
    for _ in 0..steps {
        monitor.observe(state, &grads, hp, alpha)?;
        let next = state.apply(grads, hp, Variant::Naive).and_then(|_| state.grad_augmented(x, y, hp.nu));
        match next {
            Ok(g) => grads = g,
            Err(Error::NonFinite(reason)) => {
                monitor.diverged = Some(reason);
                return Ok(monitor);
            }
            Err(e) => return Err(e),
        }
    }
    monitor.observe(state, &grads, hp, alpha)?;
    Ok(monitor)
}

/// Exact gradient Lipschitz constant of `|X w - y|^2 / (2n)`: the top eigenvalue
/// of `X^T X / n`, by power iteration.
pub fn lipschitz_least_squares(x: &Tensor) -> f64 {
    let n = x.shape()[0];
    let p = x.len() / n;
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut eig = 0.0;
    for _ in 0..10_000 {
        let mut xv = vec![0.0; n];
        for (i, o) in xv.iter_mut().enumerate() {
            *o = x.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut w = vec![0.0; p];
        for (i, &s) in xv.iter().enumerate() {
            for (wj, xj) in w.iter_mut().zip(x.row(i)) {
                *wj += s * xj / n as f64;
            }
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next: Vec<f64> = w.iter().map(|a| a / norm).collect();
        let converged = (norm - eig).abs() <= 1e-15 * norm;
        eig = norm;
        v = next;
        if converged {
            break;
        }
    }
    eig
}

/// Heuristic Lipschitz estimate of the loss gradient around the current weights:
/// the largest observed `|grad(a) - grad(b)| / |a - b|` over random nearby pairs,
/// times a safety factor of 10. Not a certified bound.
pub fn estimate_lipschitz(net: &Network, x: &Tensor, y: &Tensor, probes: usize, radius: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = net.param_ids();
    let mut best: f64 = 0.0;
    for _ in 0..probes {
        let mut a = net.clone();
        let mut b = net.clone();
        let mut dist_sq = 0.0;
        for &id in &ids {
            for (va, vb) in a.param_mut(id).data_mut().iter_mut().zip(b.param_mut(id).data_mut()) {
                let da: f64 = radius * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                let db: f64 = radius * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                *va += da;
                *vb += db;
                dist_sq += (da - db) * (da - db);
            }
        }
        let ga = a.backward(x, y)?;
        let gb = b.backward(x, y)?;
        let diff_sq: f64 = ga.iter().zip(&gb).map(|(p, q)| p.sub(q).norm_sq()).sum();
        if dist_sq > 0.0 {
            best = best.max((diff_sq / dist_sq).sqrt());
        }
    }
    Ok(10.0 * best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerKind, LossKind};
    use crate::optim::SplitPolicy;
    use crate::penalty::GroupScheme;

    fn least_squares() -> (Network, Tensor, Tensor) {
        let x = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 2.0, 1.0, 1.0, -1.0, 0.5]).unwrap();
        let y = Tensor::new(vec![4, 1], vec![1.0, 3.0, 2.5, -0.5]).unwrap();
        let net =
            Network::new(vec![2], &[LayerKind::Dense { inputs: 2, outputs: 1, bias: false }], LossKind::Mse).unwrap();
        (net, x, y)
    }

    #[test]
    fn power_iteration_matches_2x2_eigenvalue() {
        let (_, x, _) = least_squares();
        // X^T X / 4 = [[3, 0.5], [0.5, 5.25]] / 4
        let (a, b, d): (f64, f64, f64) = (3.0 / 4.0, 0.5 / 4.0, 5.25 / 4.0);
        let top = 0.5 * (a + d) + (0.25 * (a - d) * (a - d) + b * b).sqrt();
        assert!((lipschitz_least_squares(&x) - top).abs() < 1e-12);
    }

    #[test]
    fn rho_rejected_when_nonpositive() {
        let hp = HyperParams { kappa: 1.0, nu: 1.0, ..Default::default() };
        let cfg = MonitorConfig::new(1.0);
        assert!(check_sufficient_descent(1.0, 0.5, 0.1, &hp, 1.0, &cfg).is_err());
        assert!(check_sufficient_descent(1.0, 0.5, 0.1, &hp, 0.5, &cfg).unwrap());
    }

    #[test]
    fn stationary_point_holds_with_equality() {
        let (net, x, y) = least_squares();
        let hp = HyperParams {
            lambda: 100.0,
            nu: 1e9,
            alpha: crate::optim::AlphaSchedule::constant(0.1),
            ..Default::default()
        };
        // Solve the normal equations so every gradient vanishes (Gamma stays 0, nu huge).
        let mut net = net;
        let (a11, a12, a22) = (3.0, 0.5, 5.25);
        let (b1, b2) = (1.0 + 2.5 + 0.5, 6.0 + 2.5 - 0.25);
        let det = a11 * a22 - a12 * a12;
        net.layers[0].params[0].data_mut().copy_from_slice(&[(a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det]);
        let split = SplitPolicy::new(&net, &[(0, GroupScheme::PerElement, 100.0)]).unwrap();
        let mut st = OptimizerState::new(net, &split, 0.1).unwrap();
        let lip = lipschitz_least_squares(&x);
        let m = run_monitored(&mut st, &x, &y, &hp, MonitorConfig::new(lip), 5).unwrap();
        for r in &m.records()[1..] {
            assert!(r.descent_ok && r.relerr_ok);
            assert!(r.delta_q < 1e-9 && r.h_norm < 1e-9, "{r:?}");
            assert!((r.f - m.records()[0].f).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_equal_prev_gives_scaled_loss() {
        let (net, x, y) = least_squares();
        let net = net.he_init(2);
        let split = SplitPolicy::new(&net, &[(0, GroupScheme::PerElement, 1.0)]).unwrap();
        let st = OptimizerState::new(net, &split, 0.1).unwrap();
        let hp = HyperParams::default();
        let zeros = vec![Tensor::zeros(&[1, 2])];
        let f = lyapunov_f(&st, &zeros, &zeros, &hp, 0.1, &x, &y).unwrap();
        let (loss, _) = st.net.forward(&x, &y).unwrap();
        assert!((f - 0.1 * st.augmented_loss(loss, hp.nu)).abs() < 1e-15);
        let bad = vec![Tensor::filled(&[1, 2], 2.0)];
        assert!(lyapunov_f(&st, &zeros, &bad, &hp, 0.1, &x, &y).is_err());
    }

    #[test]
    fn csv_has_expected_header() {
        let mut buf = Vec::new();
        write_monitor_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), "k,F,delta_Q,H_norm,rho,rho1,descent_ok,relerr_ok");
    }
}
