//! TOML experiment configuration with fail-closed parsing and `section.key=value`
//! overrides.
//!
//! ```toml
//! [dataset]
//! kind = "blobs"
//! n = 400
//! classes = 4
//! dim = 20
//! separation = 2.0
//!
//! [network]
//! input = [20]
//! loss = "softmax_cross_entropy"
//! layers = [
//!   { kind = "dense", inputs = 20, outputs = 64 },
//!   { kind = "activation", fn = "relu" },
//!   { kind = "dense", inputs = 64, outputs = 4 },
//! ]
//!
//! [optimizer]
//! kappa = 1.0
//! nu = 10.0
//!
//! [split]
//! policy = "all_weights"
//!
//! [run]
//! epochs = 40
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::net::{LayerKind, LossKind, Network};
use crate::optim::{AlphaSchedule, HyperParams, SplitPolicy, Variant};
use crate::penalty::GroupScheme;

fn default_train_fraction() -> f64 {
    0.8
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SparseLinear {
        n: usize,
        p: usize,
        s: usize,
        snr: f64,
        #[serde(default)]
        correlation: f64,
        #[serde(default = "one")]
        train_fraction: f64,
    },
    Blobs {
        n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Optional held-out pair; otherwise the training files are split.
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
}

impl DatasetSpec {
    pub fn train_fraction(&self) -> f64 {
        match self {
            DatasetSpec::SparseLinear { train_fraction, .. }
            | DatasetSpec::Blobs { train_fraction, .. }
            | DatasetSpec::Idx { train_fraction, .. } => *train_fraction,
        }
    }

    pub fn is_sparse_linear(&self) -> bool {
        matches!(self, DatasetSpec::SparseLinear { .. })
    }

    /// Generates or loads the data and splits it into training and validation parts.
    /// With a train fraction of 1 both parts are the full dataset.
    pub fn build(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::SparseLinear { n, p, s, snr, correlation, train_fraction } => {
                data::gen_sparse_linear(*n, *p, *s, *snr, *correlation, seed)?.split(*train_fraction, seed)
            }
            DatasetSpec::Blobs { n, classes, dim, separation, train_fraction } => {
                data::gen_blobs(*n, *classes, *dim, *separation, seed)?.split(*train_fraction, seed)
            }
            DatasetSpec::Idx { images, labels, test_images, test_labels, limit, train_fraction } => {
                let train = data::load_idx(images, labels, *limit)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => Ok((train, data::load_idx(ti, tl, None)?)),
                    (None, None) => train.split(*train_fraction, seed),
                    _ => Err(Error::config("dataset.test_labels", "test images and labels must be given together")),
                }
            }
        }
    }

    fn validate(&self) -> Result<usize> {
        let tf = self.train_fraction();
        if !(tf > 0.0 && tf <= 1.0) {
            return Err(Error::config("dataset.train_fraction", format!("must lie in (0, 1], got {tf}")));
        }
        match self {
            DatasetSpec::SparseLinear { n, p, s, snr, correlation, .. } => {
                if *n == 0 {
                    return Err(Error::config("dataset.n", "must be > 0"));
                }
                if *p == 0 {
                    return Err(Error::config("dataset.p", "must be > 0"));
                }
                if s > p {
                    return Err(Error::config("dataset.s", format!("support size {s} exceeds p = {p}")));
                }
                if !(*snr > 0.0) {
                    return Err(Error::config("dataset.snr", format!("must be > 0, got {snr}")));
                }
                if !(0.0..1.0).contains(correlation) {
                    return Err(Error::config("dataset.correlation", format!("must lie in [0, 1), got {correlation}")));
                }
                Ok(*n)
            }
            DatasetSpec::Blobs { n, classes, dim, separation, .. } => {
                if *n == 0 {
                    return Err(Error::config("dataset.n", "must be > 0"));
                }
                if *classes < 2 {
                    return Err(Error::config("dataset.classes", "need at least 2 classes"));
                }
                if *dim == 0 {
                    return Err(Error::config("dataset.dim", "must be > 0"));
                }
                if !(*separation > 0.0) {
                    return Err(Error::config("dataset.separation", "must be > 0"));
                }
                Ok(*n)
            }
            DatasetSpec::Idx { limit, .. } => Ok(limit.unwrap_or(usize::MAX)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-sample input shape.
    pub input: Vec<usize>,
    pub loss: LossKind,
    pub layers: Vec<LayerKind>,
}

impl NetworkSpec {
    /// Network with zero parameters; call `he_init` before training.
    pub fn build(&self) -> Result<Network> {
        Network::new(self.input.clone(), &self.layers, self.loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kappa: f64,
    pub nu: f64,
    /// Initial step size.
    pub alpha: f64,
    pub alpha_drop_every: usize,
    pub alpha_drop_factor: f64,
    /// Explicit `[epoch, alpha]` pieces; overrides the step decay when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_milestones: Option<Vec<(usize, f64)>>,
    pub lambda: f64,
    pub variant: Variant,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self::from_hyper(&HyperParams::default())
    }
}

impl OptimizerSpec {
    pub fn hyper_params(&self) -> HyperParams {
        let alpha = match &self.alpha_milestones {
            Some(pieces) => AlphaSchedule::Piecewise(pieces.clone()),
            None => AlphaSchedule::StepDecay {
                initial: self.alpha,
                every: self.alpha_drop_every,
                factor: self.alpha_drop_factor,
            },
        };
        HyperParams {
            kappa: self.kappa,
            nu: self.nu,
            alpha,
            lambda: self.lambda,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            variant: self.variant,
        }
    }

    pub fn from_hyper(hp: &HyperParams) -> Self {
        let (alpha, every, factor, milestones) = match &hp.alpha {
            AlphaSchedule::StepDecay { initial, every, factor } => (*initial, *every, *factor, None),
            AlphaSchedule::Piecewise(p) => (p.first().map_or(0.1, |x| x.1), 0, 1.0, Some(p.clone())),
        };
        Self {
            kappa: hp.kappa,
            nu: hp.nu,
            alpha,
            alpha_drop_every: every,
            alpha_drop_factor: factor,
            alpha_milestones: milestones,
            lambda: hp.lambda,
            variant: hp.variant,
            momentum: hp.momentum,
            weight_decay: hp.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Every dense and conv weight.
    AllWeights,
    /// Only the layers listed in `split.layers`.
    Listed,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitLayer {
    pub layer: usize,
    pub scheme: GroupScheme,
    /// Defaults to `optimizer.lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub policy: SplitMode,
    /// Grouping of conv kernels under `all_weights`; dense weights are always per element.
    pub conv_scheme: GroupScheme,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<SplitLayer>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { policy: SplitMode::AllWeights, conv_scheme: GroupScheme::PerFilter, layers: Vec::new() }
    }
}

impl SplitSpec {
    pub fn build(&self, net: &Network, lambda: f64) -> Result<SplitPolicy> {
        match self.policy {
            SplitMode::AllWeights => SplitPolicy::all_weights(net, self.conv_scheme, lambda),
            SplitMode::None => Ok(SplitPolicy::none()),
            SplitMode::Listed => {
                let layers: Vec<_> =
                    self.layers.iter().map(|l| (l.layer, l.scheme, l.lambda.unwrap_or(lambda))).collect();
                SplitPolicy::new(net, &layers)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Attach the convergence monitor (naive variant, full batch, smooth network only).
    pub monitor: bool,
    /// Gradient Lipschitz constant for the monitor; estimated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lip: Option<f64>,
    /// Epochs at which the full optimizer state is checkpointed.
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    /// Keep the split (and so further sparsification) active while retraining a pruned net.
    pub retrain_with_split: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            seed: 0,
            monitor: false,
            lip: None,
            checkpoint_epochs: Vec::new(),
            retrain_with_split: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub network: NetworkSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub run: RunSpec,
}

/// Maps serde's messages onto `section.key` field names where possible.
fn toml_error(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let mut field = String::from("config");
    if let Some(rest) = msg.split("unknown field `").nth(1) {
        field = rest.split('`').next().unwrap_or("config").to_string();
    } else if let Some(rest) = msg.split("missing field `").nth(1) {
        field = rest.split('`').next().unwrap_or("config").to_string();
    }
    let location = e.span().map(|s| format!(" (bytes {}..{})", s.start, s.end)).unwrap_or_default();
    Error::config(field, format!("{msg}{location}"))
}

/// Parses and validates a configuration document. Unknown keys are errors.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(toml_error)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `section.key=value` overrides (value in TOML syntax, bare words read as
/// strings) on top of a document, then parses it.
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Table = toml::from_str(text).map_err(toml_error)?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let text = toml::to_string(&doc).map_err(|e| Error::config("config", e.to_string()))?;
    parse_config(&text)
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty override key"))?;
    let mut table = doc;
    for part in parts {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Serializes a configuration so that `parse_config(emit_config(c)) == c`.
pub fn emit_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::config("config", e.to_string()))
}

impl ExperimentConfig {
    pub fn hyper_params(&self) -> HyperParams {
        self.optimizer.hyper_params()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dataset.validate()?;
        let net = self.network.build().map_err(|e| Error::config("network.layers", e.to_string()))?;
        self.hyper_params().validate()?;
        self.split.build(&net, self.optimizer.lambda)?;
        if self.split.policy != SplitMode::Listed && !self.split.layers.is_empty() {
            return Err(Error::config("split.layers", "only used with policy = \"listed\""));
        }
        let train_n = ((n as f64) * self.dataset.train_fraction()).round() as usize;
        if n != usize::MAX && self.run.batch_size > train_n.max(1) {
            return Err(Error::config(
                "run.batch_size",
                format!("batch size {} exceeds the {train_n} training samples", self.run.batch_size),
            ));
        }
        if let Some(lip) = self.run.lip {
            if !(lip > 0.0 && lip.is_finite()) {
                return Err(Error::config("run.lip", format!("must be > 0, got {lip}")));
            }
        }
        if let Some(&e) = self.run.checkpoint_epochs.iter().find(|&&e| e > self.run.epochs) {
            return Err(Error::config(
                "run.checkpoint_epochs",
                format!("epoch {e} is past the {} training epochs", self.run.epochs),
            ));
        }
        Ok(())
    }
}
