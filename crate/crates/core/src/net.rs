//! A small deterministic sequential network with exact reverse-mode gradients.
//!
//! Inputs are batch-first: `[n, features]` for dense stacks and `[n, c, h, w]`
//! for convolutional stacks. Convolutions are stride 1 with zero padding that
//! preserves the spatial size, so kernel sizes must be odd.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `(1/c) ln(1 + exp(c x))`, a smooth stand-in for relu.
    Softplus {
        c: f64,
    },
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus { c } => {
                let t = c * x;
                (t.max(0.0) + (-t.abs()).exp().ln_1p()) / c
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus { c } => sigmoid(c * x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Serialized as a flat table, e.g. `{ kind = "dense", inputs = 4, outputs = 2 }` or
/// `{ kind = "activation", fn = "softplus", c = 5.0 }`; unknown keys are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        size: usize,
        bias: bool,
    },
    Activation {
        activation: Activation,
    },
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    Maxpool,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    Dense,
    Conv2d,
    Activation,
    Maxpool,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawFn {
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    kind: Option<RawKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inputs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outputs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<bool>,
    #[serde(default, rename = "fn", skip_serializing_if = "Option::is_none")]
    function: Option<RawFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
}

impl TryFrom<RawLayer> for LayerKind {
    type Error = String;

    fn try_from(r: RawLayer) -> std::result::Result<Self, String> {
        let kind = r.kind.ok_or("layer needs a `kind`")?;
        let need =
            |v: Option<usize>, name: &str| v.ok_or_else(|| format!("{kind:?} layer needs `{name}`").to_lowercase());
        let allowed: &[&str] = match kind {
            RawKind::Dense => &["inputs", "outputs", "bias"],
            RawKind::Conv2d => &["in_channels", "out_channels", "size", "bias"],
            RawKind::Activation => &["fn", "c"],
            RawKind::Maxpool | RawKind::Flatten => &[],
        };
        let present = [
            ("inputs", r.inputs.is_some()),
            ("outputs", r.outputs.is_some()),
            ("in_channels", r.in_channels.is_some()),
            ("out_channels", r.out_channels.is_some()),
            ("size", r.size.is_some()),
            ("bias", r.bias.is_some()),
            ("fn", r.function.is_some()),
            ("c", r.c.is_some()),
        ];
        if let Some((name, _)) = present.iter().find(|(n, p)| *p && !allowed.contains(n)) {
            return Err(format!("unknown field `{name}` for a {kind:?} layer").to_lowercase());
        }
        Ok(match kind {
            RawKind::Dense => LayerKind::Dense {
                inputs: need(r.inputs, "inputs")?,
                outputs: need(r.outputs, "outputs")?,
                bias: r.bias.unwrap_or(true),
            },
            RawKind::Conv2d => LayerKind::Conv2d {
                in_channels: need(r.in_channels, "in_channels")?,
                out_channels: need(r.out_channels, "out_channels")?,
                size: need(r.size, "size")?,
                bias: r.bias.unwrap_or(true),
            },
            RawKind::Activation => {
                let function = r.function.ok_or("activation layer needs `fn`")?;
                if r.c.is_some() && function != RawFn::Softplus {
                    return Err("only softplus takes `c`".into());
                }
                let activation = match function {
                    RawFn::Relu => Activation::Relu,
                    RawFn::Softplus => Activation::Softplus { c: r.c.ok_or("softplus needs `c`")? },
                    RawFn::Sigmoid => Activation::Sigmoid,
                    RawFn::Tanh => Activation::Tanh,
                };
                LayerKind::Activation { activation }
            }
            RawKind::Maxpool => LayerKind::Maxpool,
            RawKind::Flatten => LayerKind::Flatten,
        })
    }
}

impl From<LayerKind> for RawLayer {
    fn from(k: LayerKind) -> Self {
        let mut r = RawLayer::default();
        match k {
            LayerKind::Dense { inputs, outputs, bias } => {
                r.kind = Some(RawKind::Dense);
                r.inputs = Some(inputs);
                r.outputs = Some(outputs);
                r.bias = Some(bias);
            }
            LayerKind::Conv2d { in_channels, out_channels, size, bias } => {
                r.kind = Some(RawKind::Conv2d);
                r.in_channels = Some(in_channels);
                r.out_channels = Some(out_channels);
                r.size = Some(size);
                r.bias = Some(bias);
            }
            LayerKind::Activation { activation } => {
                r.kind = Some(RawKind::Activation);
                r.function = Some(match activation {
                    Activation::Relu => RawFn::Relu,
                    Activation::Softplus { c } => {
                        r.c = Some(c);
                        RawFn::Softplus
                    }
                    Activation::Sigmoid => RawFn::Sigmoid,
                    Activation::Tanh => RawFn::Tanh,
                });
            }
            LayerKind::Maxpool => r.kind = Some(RawKind::Maxpool),
            LayerKind::Flatten => r.kind = Some(RawKind::Flatten),
        }
        r
    }
}

impl LayerKind {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerKind::Dense { inputs, outputs, bias: true }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, size: usize) -> Self {
        LayerKind::Conv2d { in_channels, out_channels, size, bias: true }
    }

    pub fn activation(activation: Activation) -> Self {
        LayerKind::Activation { activation }
    }

    /// Shapes of the parameter tensors, weight first.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs, bias } => {
                let mut v = vec![vec![outputs, inputs]];
                if bias {
                    v.push(vec![outputs]);
                }
                v
            }
            LayerKind::Conv2d { in_channels, out_channels, size, bias } => {
                let mut v = vec![vec![out_channels, in_channels, size, size]];
                if bias {
                    v.push(vec![out_channels]);
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn has_weight(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv2d { in_channels, size, .. } => in_channels * size * size,
            _ => 0,
        }
    }

    /// Per-sample output shape, or an error when `input` does not compose.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs, .. } => {
                if input != [inputs] {
                    return Err(Error::Shape(format!(
                        "dense({inputs},{outputs}) expects per-sample input [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d { in_channels, out_channels, size, .. } => {
                if size % 2 == 0 {
                    return Err(Error::Shape(format!("conv2d kernel size {size} must be odd")));
                }
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::Shape(format!(
                        "conv2d expects per-sample input [{in_channels}, h, w], got {input:?}"
                    )));
                }
                Ok(vec![out_channels, input[1], input[2]])
            }
            LayerKind::Activation { .. } => Ok(input.to_vec()),
            LayerKind::Maxpool => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return Err(Error::Shape(format!(
                        "maxpool expects per-sample input [c, h>=2, w>=2], got {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(1/2n) sum_i |y_i - f(x_i)|^2`
    Mse,
    /// Labels are class indices stored as `f64` in a `[n]` tensor.
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn is_smooth(self) -> bool {
        true
    }
}

/// Address of one parameter tensor: layer index and slot (0 = weight, 1 = bias).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub slot: usize,
}

impl ParamId {
    pub fn is_weight(&self) -> bool {
        self.slot == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub loss: LossKind,
}

impl Network {
    /// Builds a network with zeroed parameters after checking that layer shapes compose.
    pub fn new(input_shape: Vec<usize>, kinds: &[LayerKind], loss: LossKind) -> Result<Self> {
        let layers = kinds
            .iter()
            .map(|k| Layer { kind: *k, params: k.param_shapes().iter().map(|s| Tensor::zeros(s)).collect() })
            .collect();
        let net = Network { input_shape, layers, loss };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let expected = layer.kind.param_shapes();
            if expected.len() != layer.params.len()
                || expected.iter().zip(&layer.params).any(|(s, p)| s.as_slice() != p.shape())
            {
                return Err(Error::Shape(format!("layer {i}: parameter shapes inconsistent with kind")));
            }
            shape = layer.kind.output_shape(&shape).map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("layer {i}: {m}")),
                other => other,
            })?;
        }
        if self.loss == LossKind::SoftmaxCrossEntropy && shape.len() != 1 {
            return Err(Error::Shape(format!("softmax cross-entropy needs a flat output, got {shape:?}")));
        }
        Ok(shape)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.validate().expect("validated at construction")
    }

    /// True when every activation and the loss are continuously differentiable
    /// and no max-pooling is present.
    pub fn is_smooth(&self) -> bool {
        self.loss.is_smooth()
            && self.layers.iter().all(|l| match l.kind {
                LayerKind::Activation { activation } => activation.is_smooth(),
                LayerKind::Maxpool => false,
                _ => true,
            })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| (0..l.params.len()).map(move |slot| ParamId { layer, slot }))
            .collect()
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.layers[id.layer].params[id.slot]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.layers[id.layer].params[id.slot]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// He initialisation: weights ~ N(0, 2/fan_in), biases zero.
    pub fn he_init(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let fan_in = layer.kind.fan_in();
            for (slot, p) in layer.params.iter_mut().enumerate() {
                if slot == 0 {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    for v in p.data_mut() {
                        *v = normal.sample(&mut rng);
                    }
                } else {
                    p.data_mut().fill(0.0);
                }
            }
        }
        self
    }

    fn check_batch(&self, x: &Tensor, y: &Tensor) -> Result<usize> {
        let n = x.shape()[0];
        if x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch input {:?} does not match network input [n, {:?}]",
                x.shape(),
                self.input_shape
            )));
        }
        let out = self.output_shape();
        match self.loss {
            LossKind::Mse => {
                if y.shape()[0] != n || y.shape()[1..] != out[..] {
                    return Err(Error::Shape(format!("targets {:?} do not match outputs [{n}, {out:?}]", y.shape())));
                }
            }
            LossKind::SoftmaxCrossEntropy => {
                if y.shape() != [n] {
                    return Err(Error::Shape(format!("class labels must have shape [{n}], got {:?}", y.shape())));
                }
                let k = out[0];
                if let Some(bad) = y.data().iter().find(|&&c| c < 0.0 || c.fract() != 0.0 || c as usize >= k) {
                    return Err(Error::InvalidArgument(format!("label {bad} outside 0..{k}")));
                }
            }
        }
        Ok(n)
    }

    /// Mean loss over the batch and the final-layer outputs.
    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
        self.check_batch(x, y)?;
        let trace = self.run(x);
        let out = trace.outputs.last().expect("at least the input").clone();
        let (loss, _) = loss_and_grad(self.loss, &out, y, false);
        Ok((loss, out))
    }

    /// Outputs only, no targets required.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch input {:?} does not match network input [n, {:?}]",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(self.run(x).outputs.pop().expect("at least the input"))
    }

    /// Gradients of the mean batch loss with respect to every parameter, in
    /// [`Network::param_ids`] order.
    pub fn backward(&self, x: &Tensor, y: &Tensor) -> Result<Vec<Tensor>> {
        self.loss_and_grads(x, y).map(|(_, g)| g)
    }

    pub fn loss_and_grads(&self, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        self.check_batch(x, y)?;
        let trace = self.run(x);
        let out = trace.outputs.last().expect("at least the input");
        let (loss, mut delta) = loss_and_grad(self.loss, out, y, true);
        let mut delta_t = delta.take().expect("requested");
        let mut grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.outputs[i];
            let (dx, dparams) = layer_backward(layer, input, &delta_t, trace.pool_index[i].as_deref());
            grads[i] = dparams;
            delta_t = dx;
        }
        Ok((loss, grads.into_iter().flatten().collect()))
    }

    /// Central finite differences of the batch loss for every parameter coordinate.
    pub fn finite_diff_grad(&self, x: &Tensor, y: &Tensor, h: f64) -> Result<Vec<Tensor>> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
        }
        self.check_batch(x, y)?;
        let mut probe = self.clone();
        let mut grads = Vec::new();
        for id in self.param_ids() {
            let mut g = Tensor::zeros(self.param(id).shape());
            for j in 0..g.len() {
                let orig = self.param(id).data()[j];
                probe.param_mut(id).data_mut()[j] = orig + h;
                let (lp, _) = probe.forward(x, y)?;
                probe.param_mut(id).data_mut()[j] = orig - h;
                let (lm, _) = probe.forward(x, y)?;
                probe.param_mut(id).data_mut()[j] = orig;
                g.data_mut()[j] = (lp - lm) / (2.0 * h);
            }
            grads.push(g);
        }
        Ok(grads)
    }

    fn run(&self, x: &Tensor) -> Trace {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_index = Vec::with_capacity(self.layers.len());
        outputs.push(x.clone());
        for layer in &self.layers {
            let input = outputs.last().expect("nonempty");
            let (out, idx) = layer_forward(layer, input);
            outputs.push(out);
            pool_index.push(idx);
        }
        Trace { outputs, pool_index }
    }
}

struct Trace {
    /// `outputs[0]` is the input, `outputs[i + 1]` the output of layer `i`.
    outputs: Vec<Tensor>,
    pool_index: Vec<Option<Vec<usize>>>,
}

fn layer_forward(layer: &Layer, input: &Tensor) -> (Tensor, Option<Vec<usize>>) {
    let n = input.shape()[0];
    match layer.kind {
        LayerKind::Dense { inputs, outputs, bias } => {
            let w = layer.params[0].data();
            let mut out = vec![0.0; n * outputs];
            for i in 0..n {
                let xi = &input.data()[i * inputs..(i + 1) * inputs];
                let oi = &mut out[i * outputs..(i + 1) * outputs];
                for (o, wrow) in oi.iter_mut().zip(w.chunks_exact(inputs)) {
                    *o = dot(wrow, xi);
                }
                if bias {
                    for (o, b) in oi.iter_mut().zip(layer.params[1].data()) {
                        *o += b;
                    }
                }
            }
            (Tensor { shape: vec![n, outputs], data: out }, None)
        }
        LayerKind::Conv2d { in_channels, out_channels, size, bias } => {
            let (h, w) = (input.shape()[2], input.shape()[3]);
            let pad = (size / 2) as isize;
            let k = layer.params[0].data();
            let mut out = vec![0.0; n * out_channels * h * w];
            for s in 0..n {
                for co in 0..out_channels {
                    let b = if bias { layer.params[1].data()[co] } else { 0.0 };
                    for r in 0..h {
                        for c in 0..w {
                            let mut acc = b;
                            for ci in 0..in_channels {
                                for kr in 0..size {
                                    let rr = r as isize + kr as isize - pad;
                                    if rr < 0 || rr >= h as isize {
                                        continue;
                                    }
                                    for kc in 0..size {
                                        let cc = c as isize + kc as isize - pad;
                                        if cc < 0 || cc >= w as isize {
                                            continue;
                                        }
                                        acc += k[((co * in_channels + ci) * size + kr) * size + kc]
                                            * input.data()
                                                [((s * in_channels + ci) * h + rr as usize) * w + cc as usize];
                                    }
                                }
                            }
                            out[((s * out_channels + co) * h + r) * w + c] = acc;
                        }
                    }
                }
            }
            (Tensor { shape: vec![n, out_channels, h, w], data: out }, None)
        }
        LayerKind::Activation { activation } => (input.map(|v| activation.apply(v)), None),
        LayerKind::Maxpool => {
            let (ch, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; n * ch * oh * ow];
            let mut idx = vec![0usize; out.len()];
            for s in 0..n {
                for c in 0..ch {
                    for r in 0..oh {
                        for q in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for dr in 0..2 {
                                for dq in 0..2 {
                                    let i = ((s * ch + c) * h + 2 * r + dr) * w + 2 * q + dq;
                                    if input.data()[i] > best {
                                        best = input.data()[i];
                                        best_i = i;
                                    }
                                }
                            }
                            let o = ((s * ch + c) * oh + r) * ow + q;
                            out[o] = best;
                            idx[o] = best_i;
                        }
                    }
                }
            }
            (Tensor { shape: vec![n, ch, oh, ow], data: out }, Some(idx))
        }
        LayerKind::Flatten => {
            let width = input.len() / n;
            (input.clone().reshape(vec![n, width]).expect("same length"), None)
        }
    }
}

/// Returns the gradient with respect to the layer input and the layer's parameters.
fn layer_backward(layer: &Layer, input: &Tensor, delta: &Tensor, pool: Option<&[usize]>) -> (Tensor, Vec<Tensor>) {
    let n = input.shape()[0];
    match layer.kind {
        LayerKind::Dense { inputs, outputs, bias } => {
            let w = layer.params[0].data();
            let mut dw = vec![0.0; outputs * inputs];
            let mut db = vec![0.0; outputs];
            let mut dx = vec![0.0; n * inputs];
            for i in 0..n {
                let xi = &input.data()[i * inputs..(i + 1) * inputs];
                let di = &delta.data()[i * outputs..(i + 1) * outputs];
                let dxi = &mut dx[i * inputs..(i + 1) * inputs];
                for (o, &d) in di.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    db[o] += d;
                    let dwrow = &mut dw[o * inputs..(o + 1) * inputs];
                    for (a, &xv) in dwrow.iter_mut().zip(xi) {
                        *a += d * xv;
                    }
                    for (a, &wv) in dxi.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                        *a += d * wv;
                    }
                }
            }
            let mut params = vec![Tensor { shape: vec![outputs, inputs], data: dw }];
            if bias {
                params.push(Tensor { shape: vec![outputs], data: db });
            }
            (Tensor { shape: input.shape().to_vec(), data: dx }, params)
        }
        LayerKind::Conv2d { in_channels, out_channels, size, bias } => {
            let (h, w) = (input.shape()[2], input.shape()[3]);
            let pad = (size / 2) as isize;
            let k = layer.params[0].data();
            let mut dk = vec![0.0; k.len()];
            let mut db = vec![0.0; out_channels];
            let mut dx = vec![0.0; input.len()];
            for s in 0..n {
                for co in 0..out_channels {
                    for r in 0..h {
                        for c in 0..w {
                            let d = delta.data()[((s * out_channels + co) * h + r) * w + c];
                            db[co] += d;
                            if d == 0.0 {
                                continue;
                            }
                            for ci in 0..in_channels {
                                for kr in 0..size {
                                    let rr = r as isize + kr as isize - pad;
                                    if rr < 0 || rr >= h as isize {
                                        continue;
                                    }
                                    for kc in 0..size {
                                        let cc = c as isize + kc as isize - pad;
                                        if cc < 0 || cc >= w as isize {
                                            continue;
                                        }
                                        let ki = ((co * in_channels + ci) * size + kr) * size + kc;
                                        let xi = ((s * in_channels + ci) * h + rr as usize) * w + cc as usize;
                                        dk[ki] += d * input.data()[xi];
                                        dx[xi] += d * k[ki];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut params = vec![Tensor { shape: layer.params[0].shape().to_vec(), data: dk }];
            if bias {
                params.push(Tensor { shape: vec![out_channels], data: db });
            }
            (Tensor { shape: input.shape().to_vec(), data: dx }, params)
        }
        LayerKind::Activation { activation } => (input.zip_map(delta, |x, d| d * activation.derivative(x)), Vec::new()),
        LayerKind::Maxpool => {
            let idx = pool.expect("maxpool forward records argmax");
            let mut dx = vec![0.0; input.len()];
            for (&i, &d) in idx.iter().zip(delta.data()) {
                dx[i] += d;
            }
            (Tensor { shape: input.shape().to_vec(), data: dx }, Vec::new())
        }
        LayerKind::Flatten => (delta.clone().reshape(input.shape().to_vec()).expect("same length"), Vec::new()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn loss_and_grad(kind: LossKind, out: &Tensor, y: &Tensor, want_grad: bool) -> (f64, Option<Tensor>) {
    let n = out.shape()[0];
    let inv_n = 1.0 / n as f64;
    match kind {
        LossKind::Mse => {
            let mut loss = 0.0;
            for (o, t) in out.data().iter().zip(y.data()) {
                loss += (o - t) * (o - t);
            }
            let grad = want_grad.then(|| out.zip_map(y, |o, t| (o - t) * inv_n));
            (0.5 * loss * inv_n, grad)
        }
        LossKind::SoftmaxCrossEntropy => {
            let k = out.len() / n;
            let mut loss = 0.0;
            let mut grad = want_grad.then(|| vec![0.0; out.len()]);
            for i in 0..n {
                let z = &out.data()[i * k..(i + 1) * k];
                let label = y.data()[i] as usize;
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let lse = m + sum.ln();
                loss += lse - z[label];
                if let Some(g) = grad.as_mut() {
                    for j in 0..k {
                        let p = (z[j] - lse).exp();
                        g[i * k + j] = (p - if j == label { 1.0 } else { 0.0 }) * inv_n;
                    }
                }
            }
            (loss * inv_n, grad.map(|data| Tensor { shape: out.shape().to_vec(), data }))
        }
    }
}

/// Fraction of rows whose arg-max output equals the integer label.
pub fn accuracy(outputs: &Tensor, labels: &Tensor) -> f64 {
    let n = outputs.shape()[0];
    let k = outputs.len() / n;
    let correct = (0..n)
        .filter(|&i| {
            let row = &outputs.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == labels.data()[i] as usize
        })
        .count();
    correct as f64 / n as f64
}
