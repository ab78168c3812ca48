//! Self-checks of the numerical core: the closed-form prox against a numeric
//! minimiser, backprop against finite differences, the two algebraic forms of
//! the iteration against each other, and the Lyapunov monitor on a problem with
//! a known Lipschitz constant.
//!
//! Each suite returns its measurements together with a verdict, so callers can
//! report or re-judge them.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::gen_sparse_linear;
use crate::error::Result;
use crate::monitor::{check_rate, lipschitz_least_squares, rate_constant, run_monitored, Monitor, MonitorConfig};
use crate::net::{Activation, LayerKind, LossKind, Network};
use crate::optim::{stepsize_bound, AlphaSchedule, HyperParams, OptimizerState, SplitPolicy, Variant};
use crate::penalty::{prox_oracle, GroupScheme, Grouping, Penalty};
use crate::tensor::Tensor;

pub const PROX_TOL: f64 = 1e-8;
pub const GRAD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
pub const EQUIV_TOL: f64 = 1e-10;
pub const DUAL_TOL: f64 = 1e-9;

/// Verdict of one suite.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {} ({:.2}s)", self.name, self.detail, self.elapsed.as_secs_f64())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxReport {
    pub trials: usize,
    pub max_abs_err: f64,
    /// Groups placed exactly at `|V^g| = 0, lambda, lambda + 1e-12, lambda - 1e-12`.
    pub boundary_groups: [usize; 4],
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| scale * normal(rng)).collect()).expect("shape matches")
}

/// Compares the closed-form prox with [`prox_oracle`] on random tensors, groupings
/// and thresholds, forcing some groups onto the shrinkage boundary.
pub fn prox_check(trials: usize, seed: u64) -> Result<ProxReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ProxReport { trials, max_abs_err: 0.0, boundary_groups: [0; 4] };
    for t in 0..trials {
        let grouping = if rng.random_bool(0.5) {
            Grouping::per_element(&[rng.random_range(1..=12)])
        } else {
            let shape =
                [rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
            Grouping::per_filter(&shape)?
        };
        let lambda = if t % 10 == 0 { 0.0 } else { rng.random_range(0.0..3.0) };
        let mut v = random_tensor(grouping.shape(), rng.random_range(0.1..3.0), &mut rng);
        let norms = grouping.group_norms(&v);
        let target_group = rng.random_range(0..grouping.num_groups());
        let case = t % 4;
        let target = match case {
            0 => 0.0,
            1 => lambda,
            2 => lambda + 1e-12,
            _ => lambda - 1e-12,
        };
        if target >= 0.0 && (target > 0.0 || case == 0) {
            let factor = if norms[target_group] > 0.0 { target / norms[target_group] } else { 0.0 };
            for (x, &g) in v.data_mut().iter_mut().zip(grouping.group_index()) {
                if g == target_group {
                    *x *= factor;
                }
            }
            report.boundary_groups[case] += 1;
        }
        let penalty = Penalty::new(grouping, lambda)?;
        let closed = penalty.prox(&v, 1.0)?;
        let numeric = prox_oracle(&v, &penalty)?;
        report.max_abs_err = report.max_abs_err.max(closed.max_abs_diff(&numeric));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub networks: usize,
    pub seeds: usize,
    pub max_rel_err: f64,
    /// Architecture with the worst error.
    pub worst: String,
}

/// `|a - b| / max(|a|, |b|, 1e-3)`: relative error, absolute for tiny gradients.
pub fn grad_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3)).fold(0.0, f64::max)
}

struct Probe {
    name: &'static str,
    input: Vec<usize>,
    layers: Vec<LayerKind>,
    loss: LossKind,
}

/// Architectures that together exercise every layer kind, activation and loss.
fn probes() -> Vec<Probe> {
    use Activation::*;
    use LayerKind::Activation as Act;
    vec![
        Probe {
            name: "dense-softplus-dense/mse",
            input: vec![5],
            layers: vec![LayerKind::dense(5, 6), Act { activation: Softplus { c: 3.0 } }, LayerKind::dense(6, 2)],
            loss: LossKind::Mse,
        },
        Probe {
            name: "dense-sigmoid-dense-tanh-dense/xent",
            input: vec![4],
            layers: vec![
                LayerKind::dense(4, 5),
                Act { activation: Sigmoid },
                LayerKind::Dense { inputs: 5, outputs: 4, bias: false },
                Act { activation: Tanh },
                LayerKind::dense(4, 3),
            ],
            loss: LossKind::SoftmaxCrossEntropy,
        },
        Probe {
            name: "conv-relu-maxpool-flatten-dense/xent",
            input: vec![2, 5, 5],
            layers: vec![
                LayerKind::conv2d(2, 3, 3),
                Act { activation: Relu },
                LayerKind::Maxpool,
                LayerKind::Flatten,
                LayerKind::dense(12, 3),
            ],
            loss: LossKind::SoftmaxCrossEntropy,
        },
        Probe {
            name: "conv-tanh-conv-flatten-dense/mse",
            input: vec![1, 4, 4],
            layers: vec![
                LayerKind::Conv2d { in_channels: 1, out_channels: 2, size: 3, bias: false },
                Act { activation: Tanh },
                LayerKind::conv2d(2, 2, 1),
                Act { activation: Softplus { c: 1.0 } },
                LayerKind::Flatten,
                LayerKind::dense(32, 2),
            ],
            loss: LossKind::Mse,
        },
    ]
}

fn random_targets(net: &Network, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let out = net.output_shape();
    match net.loss {
        LossKind::Mse => {
            let mut shape = vec![n];
            shape.extend(out);
            random_tensor(&shape, 1.0, rng)
        }
        LossKind::SoftmaxCrossEntropy => {
            let k: usize = out.iter().product();
            Tensor::new(vec![n], (0..n).map(|_| rng.random_range(0..k) as f64).collect()).expect("labels")
        }
    }
}

/// Randomises every parameter, including biases, so no gradient is trivially zero.
fn randomize(net: &mut Network, rng: &mut ChaCha8Rng) {
    for id in net.param_ids() {
        for v in net.param_mut(id).data_mut() {
            *v = 0.5 * normal(rng);
        }
    }
}

/// Backprop against central finite differences on every probe architecture.
pub fn gradient_check(seeds: usize) -> Result<GradReport> {
    let probes = probes();
    let mut report = GradReport { networks: probes.len(), seeds, max_rel_err: 0.0, worst: String::new() };
    for probe in &probes {
        for seed in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Network::new(probe.input.clone(), &probe.layers, probe.loss)?;
            randomize(&mut net, &mut rng);
            let mut xshape = vec![3];
            xshape.extend(&probe.input);
            let x = random_tensor(&xshape, 1.0, &mut rng);
            let y = random_targets(&net, 3, &mut rng);
            let exact = net.backward(&x, &y)?;
            let numeric = net.finite_diff_grad(&x, &y, FD_STEP)?;
            for (a, b) in exact.iter().zip(&numeric) {
                let err = grad_rel_err(a, b);
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = format!("{} seed {seed}", probe.name);
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub iterations: usize,
    /// Largest `|.|_inf` gap over `W`, `Gamma` and `V` along the whole trajectory.
    pub max_divergence: f64,
    /// Fraction of `Gamma` groups active at the end, to show the prox was exercised.
    pub final_density: f64,
    /// Largest `max_g |g^g| - lambda` seen after any step of either form.
    pub max_dual_excess: f64,
}

fn state_distance(a: &OptimizerState, b: &OptimizerState) -> f64 {
    let mut d: f64 = 0.0;
    for (pa, pb) in a.params.iter().zip(&b.params) {
        d = d.max(a.net.param(pa.id).max_abs_diff(b.net.param(pb.id)));
        if let (Some(ca), Some(cb)) = (&pa.coupled, &pb.coupled) {
            d = d.max(ca.gamma.max_abs_diff(&cb.gamma)).max(ca.v.max_abs_diff(&cb.v));
        }
    }
    d
}

/// Runs the `(W, Gamma, V)` and `(W, Gamma, g)` forms of the naive iteration side
/// by side on a conv + dense network with a per-filter group-lasso split.
pub fn formulation_equivalence(iterations: usize, seed: u64) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::new(
        vec![1, 4, 4],
        &[
            LayerKind::conv2d(1, 4, 3),
            LayerKind::activation(Activation::Softplus { c: 2.0 }),
            LayerKind::Flatten,
            LayerKind::dense(64, 3),
        ],
        LossKind::SoftmaxCrossEntropy,
    )?
    .he_init(seed);
    let split = SplitPolicy::new(&net, &[(0, GroupScheme::PerFilter, 0.05), (3, GroupScheme::PerElement, 0.02)])?;
    let x = random_tensor(&[16, 1, 4, 4], 1.0, &mut rng);
    let y = random_targets(&net, 16, &mut rng);
    let hp = HyperParams {
        kappa: 2.0,
        nu: 1.0,
        alpha: AlphaSchedule::constant(0.05),
        variant: Variant::Naive,
        ..Default::default()
    };
    let mut a = OptimizerState::new(net.clone(), &split, 0.05)?;
    let mut b = OptimizerState::new(net, &split, 0.05)?;
    let mut max_divergence: f64 = 0.0;
    let mut max_dual_excess = f64::NEG_INFINITY;
    for _ in 0..iterations {
        a.step_naive(&x, &y, &hp)?;
        b.step_reformulated(&x, &y, &hp)?;
        max_divergence = max_divergence.max(state_distance(&a, &b));
        max_dual_excess = max_dual_excess.max(a.max_dual_excess(hp.kappa)).max(b.max_dual_excess(hp.kappa));
    }
    let (mut active, mut groups) = (0, 0);
    for (_, c) in a.split_params() {
        let norms = c.penalty.grouping.group_norms(&c.gamma);
        active += norms.iter().filter(|n| **n > 0.0).count();
        groups += norms.len();
    }
    Ok(EquivalenceReport { iterations, max_divergence, final_density: active as f64 / groups as f64, max_dual_excess })
}

/// Full-batch least squares through a bias-free dense layer, with `lambda` on a
/// per-element split.
pub fn least_squares_state(
    n: usize,
    p: usize,
    correlation: f64,
    lambda: f64,
    seed: u64,
) -> Result<(OptimizerState, Tensor, Tensor, f64)> {
    let data = gen_sparse_linear(n, p, 5.min(p), 10.0, correlation, seed)?;
    let net =
        Network::new(vec![p], &[LayerKind::Dense { inputs: p, outputs: 1, bias: false }], LossKind::Mse)?.he_init(seed);
    let split = SplitPolicy::new(&net, &[(0, GroupScheme::PerElement, lambda)])?;
    let lip = lipschitz_least_squares(&data.x);
    let state = OptimizerState::new(net, &split, 1.0)?;
    Ok((state, data.x, data.y, lip))
}

#[derive(Debug, Clone)]
pub struct MonitorReport {
    pub steps: usize,
    pub alpha: f64,
    pub bound: f64,
    pub descent_violations: usize,
    pub relerr_violations: usize,
    /// Steps where `F` increased (beyond the monitor slack).
    pub f_increases: usize,
    /// Descent violations when the step length is measured on `P = (W, Gamma)` only.
    pub descent_p_violations: usize,
    /// `(K, mean |P_{k+1} - P_k|^2, C / K)` for each requested `K`.
    pub rate: Vec<(usize, f64, f64)>,
    pub max_dual_excess: f64,
    pub diverged: Option<String>,
    pub monitor: Monitor,
}

impl MonitorReport {
    pub fn rate_ok(&self) -> bool {
        !self.rate.is_empty() && self.rate.iter().all(|&(_, mean, bound)| mean <= bound)
    }
}

/// Naive full-batch iteration at `alpha = factor * stepsize_bound` under the monitor.
#[allow(clippy::too_many_arguments)]
pub fn monitor_run(
    kappa: f64,
    nu: f64,
    lambda: f64,
    factor: f64,
    correlation: f64,
    steps: usize,
    seed: u64,
    rate_ks: &[usize],
) -> Result<MonitorReport> {
    let (mut state, x, y, lip) = least_squares_state(200, 50, correlation, lambda, seed)?;
    let mut hp = HyperParams { kappa, nu, lambda, variant: Variant::Naive, ..Default::default() };
    let bound = stepsize_bound(lip, &hp)?;
    let alpha = factor * bound;
    hp.alpha = AlphaSchedule::constant(alpha);
    state.alpha = alpha;
    let cfg = if factor < 1.0 { MonitorConfig::new(lip) } else { MonitorConfig::negative_control(lip) };
    let monitor = run_monitored(&mut state, &x, &y, &hp, cfg, steps)?;
    let recs = monitor.records();
    let body = recs.get(1..).unwrap_or(&[]);
    let slack = cfg.slack;
    let f_increases = recs.windows(2).filter(|w| w[1].f > w[0].f + slack * (1.0 + w[0].f.abs())).count();
    let mut rate = Vec::new();
    if monitor.diverged().is_none() {
        if let Some(c) = rate_constant(recs) {
            for &k in rate_ks {
                rate.push((k, check_rate(recs, k)?, c / k as f64));
            }
        }
    }
    Ok(MonitorReport {
        steps,
        alpha,
        bound,
        descent_violations: body.iter().filter(|r| !r.descent_ok).count(),
        relerr_violations: body.iter().filter(|r| !r.relerr_ok).count(),
        f_increases,
        descent_p_violations: body.iter().filter(|r| !r.descent_p_ok).count(),
        rate,
        max_dual_excess: recs.iter().map(|r| r.dual_excess).fold(f64::NEG_INFINITY, f64::max),
        diverged: monitor.diverged().map(str::to_string),
        monitor,
    })
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> (Result<T>, Duration) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed())
}

fn outcome<T>(name: &'static str, r: (Result<T>, Duration), judge: impl FnOnce(&T) -> (bool, String)) -> Outcome {
    let (r, elapsed) = r;
    match r {
        Ok(v) => {
            let (passed, detail) = judge(&v);
            Outcome { name, passed, detail, elapsed }
        }
        Err(e) => Outcome { name, passed: false, detail: format!("error: {e}"), elapsed },
    }
}

/// Every suite at full size; what `dessilbi verify` runs.
pub fn run_all(seed: u64) -> Vec<Outcome> {
    let mut out = Vec::new();
    out.push(outcome("prox", timed(|| prox_check(1000, seed)), |r| {
        (r.max_abs_err <= PROX_TOL, format!("{} trials, max |closed - numeric| = {:.2e}", r.trials, r.max_abs_err))
    }));
    out.push(outcome("gradient", timed(|| gradient_check(20)), |r| {
        (
            r.max_rel_err < GRAD_TOL,
            format!("{} nets x {} seeds, max rel err {:.2e} ({})", r.networks, r.seeds, r.max_rel_err, r.worst),
        )
    }));
    out.push(outcome("equivalence", timed(|| formulation_equivalence(100, seed)), |r| {
        (r.max_divergence < EQUIV_TOL, format!("{} iterations, max divergence {:.2e}", r.iterations, r.max_divergence))
    }));
    out.push(outcome(
        "monitor",
        timed(|| monitor_run(1.0, 10.0, 0.01, 0.9, 0.0, 2000, seed.max(1), &[10, 100, 1000])),
        |r| {
            let ok = r.descent_violations == 0
                && r.relerr_violations == 0
                && r.f_increases == 0
                && r.rate_ok()
                && r.max_dual_excess <= DUAL_TOL
                && r.diverged.is_none();
            (
                ok,
                format!(
                    "{} steps at 0.9 x bound: {} descent / {} rel-err violations, {} F increases, rate ok {}",
                    r.steps,
                    r.descent_violations,
                    r.relerr_violations,
                    r.f_increases,
                    r.rate_ok()
                ),
            )
        },
    ));
    out.push(outcome(
        "monitor-negative-control",
        timed(|| monitor_run(1.0, 10.0, 0.01, 4.0, 0.9, 2000, seed.max(1), &[])),
        |r| {
            (
                r.descent_violations + r.relerr_violations >= 1,
                format!(
                    "4 x bound: {} descent / {} rel-err violations{}",
                    r.descent_violations,
                    r.relerr_violations,
                    r.diverged.as_deref().map_or(String::new(), |d| format!(", diverged ({d})"))
                ),
            )
        },
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prox_small_run_agrees() {
        let r = prox_check(200, 3).unwrap();
        assert!(r.max_abs_err <= PROX_TOL, "{r:?}");
        assert!(r.boundary_groups.iter().all(|&c| c > 0), "{r:?}");
    }

    #[test]
    fn gradient_single_seed() {
        let r = gradient_check(1).unwrap();
        assert!(r.max_rel_err < GRAD_TOL, "{r:?}");
    }

    #[test]
    fn equivalence_short_run() {
        let r = formulation_equivalence(20, 1).unwrap();
        assert!(r.max_divergence < EQUIV_TOL, "{r:?}");
    }

    #[test]
    fn rel_err_floor() {
        let a = Tensor::from_vec(vec![1e-9, 2.0]);
        let b = Tensor::from_vec(vec![2e-9, 2.0 + 2e-6]);
        assert!((grad_rel_err(&a, &b) - 1e-6).abs() < 1e-12);
    }
}
