//! The split linearized Bregman optimizer: weights `W` follow gradient steps on
//! the augmented loss `L(W) + |W - Gamma|^2 / (2 nu)` while the structural
//! parameter `Gamma` is the scaled proximal image of a mirror variable `V`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Network, ParamId};
use crate::penalty::{GroupScheme, Grouping, Penalty};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Naive,
    Mom,
    MomWd,
}

/// Step size `alpha` as a function of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSchedule {
    /// `initial * factor^(epoch / every)`
    StepDecay { initial: f64, every: usize, factor: f64 },
    /// Sorted `(first epoch, alpha)` pieces; the first piece must start at epoch 0.
    Piecewise(Vec<(usize, f64)>),
}

impl AlphaSchedule {
    pub fn constant(alpha: f64) -> Self {
        AlphaSchedule::Piecewise(vec![(0, alpha)])
    }

    pub fn at(&self, epoch: usize) -> f64 {
        match self {
            AlphaSchedule::StepDecay { initial, every, factor } => {
                let drops = if *every == 0 { 0 } else { epoch / every };
                initial * factor.powi(drops as i32)
            }
            AlphaSchedule::Piecewise(pieces) => {
                pieces.iter().take_while(|(start, _)| *start <= epoch).last().map(|&(_, a)| a).unwrap_or(pieces[0].1)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            AlphaSchedule::StepDecay { initial, factor, .. } => {
                if !(*initial > 0.0 && initial.is_finite()) {
                    return Err(Error::config("optimizer.alpha", "step size must be > 0"));
                }
                if !(*factor > 0.0 && factor.is_finite()) {
                    return Err(Error::config("optimizer.alpha_drop_factor", "must be > 0"));
                }
            }
            AlphaSchedule::Piecewise(pieces) => {
                if pieces.first().map(|p| p.0) != Some(0) {
                    return Err(Error::config("optimizer.alpha_milestones", "first piece must start at epoch 0"));
                }
                if pieces.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(Error::config("optimizer.alpha_milestones", "epochs must increase"));
                }
                if pieces.iter().any(|p| !(p.1 > 0.0 && p.1.is_finite())) {
                    return Err(Error::config("optimizer.alpha_milestones", "step sizes must be > 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub kappa: f64,
    pub nu: f64,
    pub alpha: AlphaSchedule,
    pub lambda: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub variant: Variant,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            nu: 10.0,
            alpha: AlphaSchedule::StepDecay { initial: 0.1, every: 30, factor: 0.1 },
            lambda: 1.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            variant: Variant::Naive,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::config("optimizer.kappa", format!("must be > 0, got {}", self.kappa)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::config("optimizer.nu", format!("must be > 0, got {}", self.nu)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("optimizer.lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        self.alpha.validate()
    }
}

/// Step size for `epoch` under the configured schedule.
pub fn lr_schedule(hp: &HyperParams, epoch: usize) -> f64 {
    hp.alpha.at(epoch)
}

/// Largest constant step size for which the iteration is guaranteed to converge:
/// `2 / (kappa (lip + 1/nu))`.
pub fn stepsize_bound(lip: f64, hp: &HyperParams) -> Result<f64> {
    if !(lip > 0.0 && lip.is_finite()) {
        return Err(Error::InvalidArgument(format!("Lipschitz constant must be > 0, got {lip}")));
    }
    Ok(2.0 / (hp.kappa * (lip + 1.0 / hp.nu)))
}

/// Which weight tensors are lifted to `(W, Gamma)` and under which penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPolicy {
    penalties: Vec<(ParamId, Penalty)>,
}

impl SplitPolicy {
    pub fn none() -> Self {
        Self { penalties: Vec::new() }
    }

    /// Splits the weights of the listed layers.
    pub fn new(net: &Network, layers: &[(usize, GroupScheme, f64)]) -> Result<Self> {
        let mut penalties = Vec::new();
        for &(layer, scheme, lambda) in layers {
            let l = net
                .layers
                .get(layer)
                .ok_or_else(|| Error::config("split.layers", format!("layer {layer} does not exist")))?;
            if !l.kind.has_weight() {
                return Err(Error::config("split.layers", format!("layer {layer} has no weight tensor to split")));
            }
            let id = ParamId { layer, slot: 0 };
            if penalties.iter().any(|(p, _)| *p == id) {
                return Err(Error::config("split.layers", format!("layer {layer} listed twice")));
            }
            let grouping = Grouping::new(scheme, net.param(id).shape())
                .map_err(|e| Error::config("split.layers", format!("layer {layer}: {e}")))?;
            penalties.push((id, Penalty::new(grouping, lambda)?));
        }
        penalties.sort_by_key(|(id, _)| *id);
        Ok(Self { penalties })
    }

    /// Splits every dense/conv weight: per-element on dense, `conv_scheme` on conv.
    pub fn all_weights(net: &Network, conv_scheme: GroupScheme, lambda: f64) -> Result<Self> {
        let layers: Vec<_> = net
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l.kind {
                crate::net::LayerKind::Dense { .. } => Some((i, GroupScheme::PerElement, lambda)),
                crate::net::LayerKind::Conv2d { .. } => Some((i, conv_scheme, lambda)),
                _ => None,
            })
            .collect();
        Self::new(net, &layers)
    }

    pub fn penalties(&self) -> &[(ParamId, Penalty)] {
        &self.penalties
    }

    pub fn is_empty(&self) -> bool {
        self.penalties.is_empty()
    }

    pub fn penalty(&self, id: ParamId) -> Option<&Penalty> {
        self.penalties.iter().find(|(p, _)| *p == id).map(|(_, p)| p)
    }
}

/// Structural parameter and mirror variable attached to one split weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupled {
    pub gamma: Tensor,
    pub v: Tensor,
    pub penalty: Penalty,
}

impl Coupled {
    /// Dual iterate `g = V - Gamma / kappa`, a subgradient of the penalty at `Gamma`.
    pub fn dual(&self, kappa: f64) -> Tensor {
        self.v.zip_map(&self.gamma, |v, g| v - g / kappa)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub id: ParamId,
    pub velocity: Tensor,
    pub coupled: Option<Coupled>,
    /// Coordinates held at exactly zero (1.0 = keep, 0.0 = pruned).
    pub mask: Option<Tensor>,
}

/// Gradients of the augmented loss at the current iterate.
#[derive(Debug, Clone)]
pub struct AugmentedGrads {
    /// Plain batch loss `L(W)`.
    pub loss: f64,
    /// `grad_W L + (W - Gamma)/nu` on split weights, plain gradient elsewhere.
    pub w: Vec<Tensor>,
    /// `(Gamma - W)/nu` for split weights.
    pub gamma: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub net: Network,
    pub params: Vec<ParamState>,
    pub step: u64,
    pub alpha: f64,
}

impl OptimizerState {
    /// Wraps an initialised network; `Gamma` and `V` start at zero.
    pub fn new(net: Network, split: &SplitPolicy, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {alpha}")));
        }
        let params = net
            .param_ids()
            .into_iter()
            .map(|id| {
                let shape = net.param(id).shape().to_vec();
                ParamState {
                    id,
                    velocity: Tensor::zeros(&shape),
                    coupled: split.penalty(id).map(|p| Coupled {
                        gamma: Tensor::zeros(&shape),
                        v: Tensor::zeros(&shape),
                        penalty: p.clone(),
                    }),
                    mask: None,
                }
            })
            .collect::<Vec<_>>();
        for (id, p) in split.penalties() {
            p.grouping.covers(net.param(*id))?;
        }
        Ok(Self { net, params, step: 0, alpha })
    }

    pub fn split_params(&self) -> impl Iterator<Item = (&ParamState, &Coupled)> {
        self.params.iter().filter_map(|p| p.coupled.as_ref().map(|c| (p, c)))
    }

    pub fn weight(&self, id: ParamId) -> &Tensor {
        self.net.param(id)
    }

    /// Holds the masked coordinates of each listed parameter at zero from now on.
    pub fn set_masks(&mut self, masks: Vec<(ParamId, Tensor)>) -> Result<()> {
        for (id, mask) in masks {
            let idx = self
                .params
                .iter()
                .position(|p| p.id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("no parameter {id:?}")))?;
            mask.check_same_shape(self.net.param(id), "mask")?;
            self.params[idx].mask = Some(mask);
        }
        self.enforce_masks();
        Ok(())
    }

    fn enforce_masks(&mut self) {
        for ps in &self.params {
            if let Some(mask) = &ps.mask {
                let w = self.net.param_mut(ps.id);
                for (x, &m) in w.data_mut().iter_mut().zip(mask.data()) {
                    if m == 0.0 {
                        *x = 0.0;
                    }
                }
            }
        }
    }

    /// Augmented loss `L(W) + sum |W - Gamma|^2 / (2 nu)` given the plain loss.
    pub fn augmented_loss(&self, plain_loss: f64, nu: f64) -> f64 {
        let coupling: f64 = self.split_params().map(|(ps, c)| self.net.param(ps.id).sub(&c.gamma).norm_sq()).sum();
        plain_loss + coupling / (2.0 * nu)
    }

    pub fn grad_augmented(&self, x: &Tensor, y: &Tensor, nu: f64) -> Result<AugmentedGrads> {
        let (loss, grads) = self.net.loss_and_grads(x, y)?;
        self.augment(loss, grads, nu)
    }

    pub(crate) fn augment(&self, loss: f64, mut grads: Vec<Tensor>, nu: f64) -> Result<AugmentedGrads> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss} at step {}", self.step)));
        }
        let inv_nu = 1.0 / nu;
        let mut gamma = Vec::with_capacity(grads.len());
        for (ps, g) in self.params.iter().zip(grads.iter_mut()) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of layer {} slot {} at step {}",
                    ps.id.layer, ps.id.slot, self.step
                )));
            }
            match &ps.coupled {
                Some(c) => {
                    let diff = self.net.param(ps.id).sub(&c.gamma);
                    g.axpy(inv_nu, &diff);
                    gamma.push(Some(diff.scale(-inv_nu)));
                }
                None => gamma.push(None),
            }
        }
        Ok(AugmentedGrads { loss, w: grads, gamma })
    }

    /// One step of the variant selected in `hp`.
    pub fn step(&mut self, x: &Tensor, y: &Tensor, hp: &HyperParams) -> Result<f64> {
        let grads = self.grad_augmented(x, y, hp.nu)?;
        self.apply(grads, hp, hp.variant)
    }

    pub fn step_naive(&mut self, x: &Tensor, y: &Tensor, hp: &HyperParams) -> Result<f64> {
        expect_variant(hp, Variant::Naive)?;
        self.step(x, y, hp)
    }

    pub fn step_momentum(&mut self, x: &Tensor, y: &Tensor, hp: &HyperParams) -> Result<f64> {
        expect_variant(hp, Variant::Mom)?;
        self.step(x, y, hp)
    }

    pub fn step_momentum_wd(&mut self, x: &Tensor, y: &Tensor, hp: &HyperParams) -> Result<f64> {
        expect_variant(hp, Variant::MomWd)?;
        self.step(x, y, hp)
    }

    /// Applies precomputed gradients; returns the plain loss at the pre-step iterate.
    pub fn apply(&mut self, mut grads: AugmentedGrads, hp: &HyperParams, variant: Variant) -> Result<f64> {
        let lr = hp.kappa * self.alpha;
        for (i, ps) in self.params.iter_mut().enumerate() {
            let g = &mut grads.w[i];
            if let Some(mask) = &ps.mask {
                for (gv, &m) in g.data_mut().iter_mut().zip(mask.data()) {
                    if m == 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let w = self.net.param_mut(ps.id);
            match variant {
                Variant::Naive => w.axpy(-lr, g),
                Variant::Mom | Variant::MomWd => {
                    let tau = hp.momentum;
                    for (v, &gv) in ps.velocity.data_mut().iter_mut().zip(g.data()) {
                        *v = tau * *v + gv;
                    }
                    let beta = if variant == Variant::MomWd { hp.weight_decay } else { 0.0 };
                    for (wv, &v) in w.data_mut().iter_mut().zip(ps.velocity.data()) {
                        *wv = *wv - lr * v - beta * *wv;
                    }
                }
            }
            if let (Some(c), Some(gg)) = (ps.coupled.as_mut(), grads.gamma[i].as_ref()) {
                c.v.axpy(-self.alpha, gg);
                c.gamma = c.penalty.prox(&c.v, hp.kappa)?;
            }
        }
        self.enforce_masks();
        self.step += 1;
        Ok(grads.loss)
    }

    /// The same naive iteration written in `(W, Gamma, g)` variables:
    /// `Gamma+ = Prox_{kappa Omega}(Gamma + kappa (g - alpha grad_Gamma))` and
    /// `g+ = g - (Gamma+ - Gamma + kappa alpha grad_Gamma) / kappa`.
    pub fn step_reformulated(&mut self, x: &Tensor, y: &Tensor, hp: &HyperParams) -> Result<f64> {
        expect_variant(hp, Variant::Naive)?;
        let grads = self.grad_augmented(x, y, hp.nu)?;
        let kappa = hp.kappa;
        let lr = kappa * self.alpha;
        for (i, ps) in self.params.iter_mut().enumerate() {
            self.net.param_mut(ps.id).axpy(-lr, &grads.w[i]);
            if let (Some(c), Some(gg)) = (ps.coupled.as_mut(), grads.gamma[i].as_ref()) {
                let g = c.dual(kappa);
                let mut arg = g.clone();
                arg.axpy(-self.alpha, gg);
                let arg = c.gamma.add(&arg.scale(kappa));
                let gamma_next = c.penalty.prox_scaled(&arg, kappa)?;
                let mut g_next = g;
                let mut change = gamma_next.sub(&c.gamma);
                change.axpy(kappa * self.alpha, gg);
                g_next.axpy(-1.0 / kappa, &change);
                c.v = g_next.zip_map(&gamma_next, |gv, gm| gv + gm / kappa);
                c.gamma = gamma_next;
            }
        }
        self.enforce_masks();
        self.step += 1;
        Ok(grads.loss)
    }

    /// Largest dual-ball violation `max_g |g^g| - lambda` over split weights (<= 0 when feasible).
    pub fn max_dual_excess(&self, kappa: f64) -> f64 {
        self.split_params()
            .map(|(_, c)| c.penalty.dual_norm(&c.dual(kappa)) - c.penalty.lambda)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn expect_variant(hp: &HyperParams, v: Variant) -> Result<()> {
    if hp.variant == v {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("step for {v:?} called with variant {:?}", hp.variant)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerKind, LossKind};

    fn linear(p: usize) -> Network {
        Network::new(vec![p], &[LayerKind::Dense { inputs: p, outputs: 1, bias: false }], LossKind::Mse).unwrap()
    }

    #[test]
    fn schedule_decays_by_decade() {
        let hp = HyperParams::default();
        assert_eq!(lr_schedule(&hp, 0), 0.1);
        assert!((lr_schedule(&hp, 30) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(&hp, 59) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(&hp, 60) - 0.001).abs() < 1e-15);
        let pw = AlphaSchedule::Piecewise(vec![(0, 0.5), (10, 0.2)]);
        assert_eq!(pw.at(9), 0.5);
        assert_eq!(pw.at(10), 0.2);
    }

    #[test]
    fn bound_formula() {
        let hp = HyperParams { kappa: 1.0, nu: 1.0, ..Default::default() };
        assert_eq!(stepsize_bound(1.0, &hp).unwrap(), 1.0);
        let hp = HyperParams { kappa: 10.0, nu: 1.0, ..Default::default() };
        assert!((stepsize_bound(1.0, &hp).unwrap() - 0.1).abs() < 1e-16);
        assert!(stepsize_bound(0.0, &hp).is_err());
    }

    #[test]
    fn validation_names_field() {
        let hp = HyperParams { kappa: 0.0, ..Default::default() };
        assert!(hp.validate().unwrap_err().to_string().contains("optimizer.kappa"));
        let hp = HyperParams { nu: -1.0, ..Default::default() };
        assert!(hp.validate().unwrap_err().to_string().contains("optimizer.nu"));
        let hp = HyperParams { momentum: 1.0, ..Default::default() };
        assert!(hp.validate().is_err());
    }

    #[test]
    fn bias_cannot_be_split() {
        let net = Network::new(
            vec![3],
            &[LayerKind::dense(3, 2), LayerKind::activation(crate::net::Activation::Tanh)],
            LossKind::Mse,
        )
        .unwrap();
        assert!(SplitPolicy::new(&net, &[(1, GroupScheme::PerElement, 1.0)]).is_err());
        assert!(SplitPolicy::new(&net, &[(0, GroupScheme::PerFilter, 1.0)]).is_err());
        let s = SplitPolicy::all_weights(&net, GroupScheme::PerFilter, 1.0).unwrap();
        assert_eq!(s.penalties().len(), 1);
        assert!(s.penalties()[0].0.is_weight());
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        // W = Gamma and the data fitted exactly: every gradient vanishes.
        let mut net = linear(2);
        net.layers[0].params[0].data_mut().copy_from_slice(&[0.0, 0.0]);
        let split = SplitPolicy::new(&net, &[(0, GroupScheme::PerElement, 1.0)]).unwrap();
        let mut st = OptimizerState::new(net, &split, 0.1).unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = Tensor::zeros(&[2, 1]);
        let before = st.clone();
        st.step_naive(&x, &y, &HyperParams::default()).unwrap();
        assert_eq!(st.net, before.net);
        assert_eq!(st.params, before.params);
    }

    #[test]
    fn threshold_regime_keeps_gamma_zero() {
        let mut net = linear(3).he_init(1);
        net.layers[0].params[0].data_mut().copy_from_slice(&[0.5, -0.3, 0.2]);
        let split = SplitPolicy::new(&net, &[(0, GroupScheme::PerElement, 10.0)]).unwrap();
        let mut st = OptimizerState::new(net.clone(), &split, 0.1).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.3, 2.0]).unwrap();
        let y = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        st.step_naive(&x, &y, &HyperParams { lambda: 10.0, ..Default::default() }).unwrap();
        let c = st.params[0].coupled.as_ref().unwrap();
        assert_eq!(c.gamma.count_nonzero(), 0);
        assert!(c.v.norm() > 0.0);
        assert_ne!(st.net.layers[0].params[0], net.layers[0].params[0]);
    }

    #[test]
    fn momentum_velocity_is_geometric_series() {
        // Constant gradient fed straight through `apply`.
        let net =
            Network::new(vec![1], &[LayerKind::Dense { inputs: 1, outputs: 1, bias: true }], LossKind::Mse).unwrap();
        let mut st = OptimizerState::new(net, &SplitPolicy::none(), 0.1).unwrap();
        let hp = HyperParams { variant: Variant::Mom, momentum: 0.5, ..Default::default() };
        let grad = Tensor::from_vec(vec![2.0]);
        for k in 1..=6 {
            let g =
                AugmentedGrads { loss: 0.0, w: vec![Tensor::zeros(&[1, 1]), grad.clone()], gamma: vec![None, None] };
            st.apply(g, &hp, Variant::Mom).unwrap();
            let expected = (1.0 - 0.5f64.powi(k)) / (1.0 - 0.5) * 2.0;
            assert!((st.params[1].velocity.data()[0] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn weight_decay_scales_weights() {
        let mut net = linear(2);
        net.layers[0].params[0].data_mut().copy_from_slice(&[1.0, -2.0]);
        let mut st = OptimizerState::new(net, &SplitPolicy::none(), 0.1).unwrap();
        let hp = HyperParams { variant: Variant::MomWd, momentum: 0.0, weight_decay: 0.1, ..Default::default() };
        for k in 1..=3 {
            let g = AugmentedGrads { loss: 0.0, w: vec![Tensor::zeros(&[1, 2])], gamma: vec![None] };
            st.apply(g, &hp, Variant::MomWd).unwrap();
            let s = 0.9f64.powi(k);
            assert!((st.net.layers[0].params[0].data()[0] - s).abs() < 1e-15);
            assert!((st.net.layers[0].params[0].data()[1] + 2.0 * s).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_variant_rejected() {
        let net = linear(1);
        let mut st = OptimizerState::new(net, &SplitPolicy::none(), 0.1).unwrap();
        let x = Tensor::zeros(&[1, 1]);
        let hp = HyperParams { variant: Variant::Mom, ..Default::default() };
        assert!(st.step_naive(&x, &x, &hp).is_err());
        assert!(st.step_reformulated(&x, &x, &hp).is_err());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut net = linear(1);
        net.layers[0].params[0].data_mut()[0] = 1e300;
        let mut st = OptimizerState::new(net, &SplitPolicy::none(), 0.1).unwrap();
        let x = Tensor::filled(&[1, 1], 1e300);
        let y = Tensor::zeros(&[1, 1]);
        assert!(matches!(st.step(&x, &y, &HyperParams::default()), Err(Error::NonFinite(_))));
    }
}
