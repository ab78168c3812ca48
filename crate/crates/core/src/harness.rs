//! Training loops and experiments: plain runs with path recording, one-shot
//! prune and retrain, rewind fine-tuning, SGD baselines, support recovery and
//! the `(kappa, nu)` ablation grid.
//!
//! Every run is a pure function of its configuration: data, initialization and
//! per-epoch shuffles draw from independent streams derived from `run.seed`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{emit_config, ExperimentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::monitor::{
    self, estimate_lipschitz, lipschitz_least_squares, write_monitor_csv, LyapunovRecord, Monitor, MonitorConfig,
};
use crate::net::{LayerKind, LossKind, Network, ParamId};
use crate::optim::{lr_schedule, HyperParams, OptimizerState, SplitPolicy};
use crate::path::{self, inverse_scale_order, record_epoch, Mask, PathRecord};
use crate::tensor::Tensor;

const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_LIP: u64 = 4;

/// Coefficient of the `l1` SGD baseline.
pub const L1_COEFF: f64 = 1e-3;

/// Independent seed for `stream` (splitmix64 finalizer).
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Datasets and initial network of a configuration.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Network)> {
    let (train, val) = cfg.dataset.build(stream_seed(cfg.run.seed, STREAM_DATA))?;
    let net = cfg.network.build()?.he_init(stream_seed(cfg.run.seed, STREAM_INIT));
    Ok((train, val, net))
}

fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    if batch_size == 0 || batch_size >= n {
        return vec![(0..n).collect()];
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_SHUFFLE + ((epoch as u64) << 8))));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn is_full_batch(cfg: &ExperimentConfig, train: &Dataset) -> bool {
    cfg.run.batch_size == 0 || cfg.run.batch_size >= train.len()
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<PathRecord>,
    /// Full optimizer state after the given number of epochs.
    pub checkpoints: BTreeMap<usize, OptimizerState>,
    pub initial: Network,
    pub final_state: OptimizerState,
    pub monitor: Option<Vec<LyapunovRecord>>,
    pub train: Dataset,
    pub val: Dataset,
}

impl RunResult {
    pub fn monitor_violations(&self) -> usize {
        self.monitor.as_ref().map_or(0, |m| m.iter().filter(|r| !r.descent_ok || !r.relerr_ok).count())
    }
}

struct Loop<'a> {
    cfg: &'a ExperimentConfig,
    hp: &'a HyperParams,
    train: &'a Dataset,
    val: &'a Dataset,
    checkpoint_at: &'a [usize],
}

struct LoopOutput {
    records: Vec<PathRecord>,
    checkpoints: BTreeMap<usize, OptimizerState>,
    monitor: Option<Monitor>,
    failure: Option<Error>,
}

impl Loop<'_> {
    /// Trains epochs `start..end`, recording before the first and after each epoch.
    fn run(&self, state: &mut OptimizerState, start: usize, end: usize, mut monitor: Option<Monitor>) -> LoopOutput {
        let mut out = LoopOutput { records: Vec::new(), checkpoints: BTreeMap::new(), monitor: None, failure: None };
        let full = is_full_batch(self.cfg, self.train);
        let snapshot = |epoch: usize, state: &OptimizerState, out: &mut LoopOutput| -> Result<()> {
            out.records.push(record_epoch(state, self.train, self.val, epoch)?);
            if self.checkpoint_at.contains(&epoch) {
                out.checkpoints.insert(epoch, state.clone());
            }
            Ok(())
        };
        if let Err(e) = snapshot(start, state, &mut out) {
            out.failure = Some(e);
            return out;
        }
        for epoch in start..end {
            state.alpha = lr_schedule(self.hp, epoch);
            let step = |state: &mut OptimizerState, monitor: &mut Option<Monitor>| -> Result<()> {
                for rows in batches(self.train.len(), self.cfg.run.batch_size, self.cfg.run.seed, epoch) {
                    let (x, y) = if full {
                        (self.train.x.clone(), self.train.y.clone())
                    } else {
                        (self.train.x.select_rows(&rows), self.train.y.select_rows(&rows))
                    };
                    match monitor.as_mut() {
                        Some(m) => {
                            let grads = state.grad_augmented(&x, &y, self.hp.nu)?;
                            m.observe(state, &grads, self.hp, state.alpha)?;
                            state.apply(grads, self.hp, self.hp.variant)?;
                        }
                        None => {
                            state.step(&x, &y, self.hp)?;
                        }
                    }
                }
                Ok(())
            };
            let result = step(state, &mut monitor).and_then(|_| snapshot(epoch + 1, state, &mut out));
            if let Err(e) = result {
                out.failure = Some(match e {
                    Error::NonFinite(reason) => Error::Diverged { epoch, reason },
                    other => other,
                });
                break;
            }
        }
        out.monitor = monitor;
        out
    }
}

/// A single bias-free dense layer under MSE, whose Lipschitz constant is exact.
fn is_least_squares(net: &Network) -> bool {
    net.loss == LossKind::Mse
        && matches!(net.layers.as_slice(), [l] if matches!(l.kind, LayerKind::Dense { bias: false, .. }))
}

fn monitor_for(cfg: &ExperimentConfig, hp: &HyperParams, net: &Network, train: &Dataset) -> Result<Option<Monitor>> {
    if !cfg.run.monitor {
        return Ok(None);
    }
    if !monitor::applicable(net, hp, is_full_batch(cfg, train)) {
        return Err(Error::config(
            "run.monitor",
            "the monitor needs the naive variant, full-batch training and a smooth network",
        ));
    }
    let lip = match cfg.run.lip {
        Some(l) => l,
        None if is_least_squares(net) => lipschitz_least_squares(&train.x),
        None => estimate_lipschitz(net, &train.x, &train.y, 16, 1e-2, stream_seed(cfg.run.seed, STREAM_LIP))?,
    };
    Ok(Some(Monitor::new(MonitorConfig::new(lip))?))
}

/// Trains the configured model, recording the path at every epoch.
///
/// On divergence the records gathered so far are written to `out` (when given)
/// before the error is returned.
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let hp = cfg.hyper_params();
    let (train, val, net) = prepare(cfg)?;
    let split = cfg.split.build(&net, hp.lambda)?;
    let mut state = OptimizerState::new(net.clone(), &split, lr_schedule(&hp, 0))?;
    let monitor = monitor_for(cfg, &hp, &net, &train)?;
    let looper = Loop { cfg, hp: &hp, train: &train, val: &val, checkpoint_at: &cfg.run.checkpoint_epochs };
    let output = looper.run(&mut state, 0, cfg.run.epochs, monitor);
    let result = RunResult {
        records: output.records,
        checkpoints: output.checkpoints,
        initial: net,
        final_state: state,
        monitor: output.monitor.map(Monitor::into_records),
        train,
        val,
    };
    if let Some(dir) = out {
        write_run_dir(dir, cfg, &result)?;
    }
    match output.failure {
        Some(e) => Err(e),
        None => Ok(result),
    }
}

/// Epoch-at-a-time training with the same batches and schedule as [`train`].
#[derive(Debug, Clone)]
pub struct Session {
    pub cfg: ExperimentConfig,
    pub train: Dataset,
    pub val: Dataset,
    pub state: OptimizerState,
    hp: HyperParams,
    epoch: usize,
}

impl Session {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hp = cfg.hyper_params();
        let (train, val, net) = prepare(&cfg)?;
        let split = cfg.split.build(&net, hp.lambda)?;
        let state = OptimizerState::new(net, &split, lr_schedule(&hp, 0))?;
        Ok(Self { cfg, train, val, state, hp, epoch: 0 })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Path record of the current iterate.
    pub fn record(&self) -> Result<PathRecord> {
        record_epoch(&self.state, &self.train, &self.val, self.epoch)
    }

    /// Trains one more epoch and returns its record. A failed epoch leaves the
    /// state partially updated.
    pub fn run_epoch(&mut self) -> Result<PathRecord> {
        let epoch = self.epoch;
        self.state.alpha = lr_schedule(&self.hp, epoch);
        let full = is_full_batch(&self.cfg, &self.train);
        for rows in batches(self.train.len(), self.cfg.run.batch_size, self.cfg.run.seed, epoch) {
            let result = if full {
                self.state.step(&self.train.x, &self.train.y, &self.hp)
            } else {
                self.state.step(&self.train.x.select_rows(&rows), &self.train.y.select_rows(&rows), &self.hp)
            };
            result.map_err(|e| match e {
                Error::NonFinite(reason) => Error::Diverged { epoch, reason },
                other => other,
            })?;
        }
        self.epoch += 1;
        self.record()
    }
}

/// Writes the resolved configuration, path exports, monitor CSV and checkpoints.
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, result: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write("config.toml", emit_config(cfg)?.as_bytes())?;
    let mut csv = Vec::new();
    path::write_path_csv(&result.records, &mut csv)?;
    write("path.csv", &csv)?;
    let mut json = Vec::new();
    path::write_path_json(&result.records, &mut json)?;
    write("path.json", &json)?;
    if let Some(m) = &result.monitor {
        let mut buf = Vec::new();
        write_monitor_csv(m, &mut buf)?;
        write("monitor.csv", &buf)?;
    }
    if !result.checkpoints.is_empty() {
        let ckdir = dir.join("checkpoints");
        fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
        for (epoch, state) in &result.checkpoints {
            let meta = serde_json::json!({ "epoch": epoch, "step": state.step }).to_string();
            checkpoint::save(&checkpoint_path(dir, *epoch), &checkpoint::from_state(state, meta))?;
        }
    }
    Ok(())
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

/// Rebuilds the optimizer state of a configuration from a saved checkpoint.
pub fn load_state(cfg: &ExperimentConfig, file: &Path) -> Result<OptimizerState> {
    let hp = cfg.hyper_params();
    let net = cfg.network.build()?;
    let split = cfg.split.build(&net, hp.lambda)?;
    let mut state = OptimizerState::new(net, &split, lr_schedule(&hp, 0))?;
    checkpoint::restore_into(&mut state, &checkpoint::load(file)?)?;
    Ok(state)
}

/// Reconstructs a finished run from its directory: the resolved config, the
/// recorded path and every saved checkpoint. Data and initialization are
/// regenerated from the config, which determines them exactly.
pub fn resume_run(run_dir: &Path) -> Result<(ExperimentConfig, RunResult)> {
    let cfg_path = run_dir.join("config.toml");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = crate::config::parse_config(&text)?;
    let (train, val, net) = prepare(&cfg)?;
    let path_file = run_dir.join("path.json");
    let records = path::read_path_json(&fs::read_to_string(&path_file).map_err(|e| Error::io(&path_file, e))?)?;
    let mut checkpoints = BTreeMap::new();
    let ckdir = run_dir.join("checkpoints");
    if ckdir.is_dir() {
        for entry in fs::read_dir(&ckdir).map_err(|e| Error::io(&ckdir, e))? {
            let file = entry.map_err(|e| Error::io(&ckdir, e))?.path();
            let epoch = file
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("epoch_"))
                .and_then(|s| s.parse::<usize>().ok());
            if let Some(epoch) = epoch {
                checkpoints.insert(epoch, load_state(&cfg, &file)?);
            }
        }
    }
    let hp = cfg.hyper_params();
    let final_state = match checkpoints.values().next_back() {
        Some(s) => s.clone(),
        None => OptimizerState::new(net.clone(), &cfg.split.build(&net, hp.lambda)?, lr_schedule(&hp, 0))?,
    };
    let run = RunResult { records, checkpoints, initial: net, final_state, monitor: None, train, val };
    Ok((cfg, run))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Restart from the run's original initialization.
    SameInit,
    /// Restart from the weights after the given epoch.
    Rewind(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrainPlan {
    /// Epoch whose `Gamma` support becomes the mask.
    pub mask_epoch: usize,
    /// Total epoch budget `T`.
    pub epochs: usize,
    pub init: InitPolicy,
}

impl RetrainPlan {
    fn validate(&self) -> Result<()> {
        if self.mask_epoch > self.epochs {
            return Err(Error::InvalidArgument(format!(
                "mask epoch {} is past the budget of {} epochs",
                self.mask_epoch, self.epochs
            )));
        }
        if let InitPolicy::Rewind(e) = self.init {
            if e > self.epochs {
                return Err(Error::InvalidArgument(format!(
                    "rewind epoch {e} is past the budget of {} epochs",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    fn start_epoch(&self) -> usize {
        match self.init {
            InitPolicy::SameInit => 0,
            InitPolicy::Rewind(e) => e,
        }
    }

    /// Checkpoints the source run must provide.
    pub fn required_epochs(&self) -> Vec<usize> {
        let mut v = vec![self.mask_epoch];
        if let InitPolicy::Rewind(e) = self.init {
            v.push(e);
        }
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone)]
pub struct RetrainResult {
    pub records: Vec<PathRecord>,
    pub final_val_loss: f64,
    pub final_val_acc: Option<f64>,
    /// Fraction of split-weight coordinates kept by the mask (1 for dense runs).
    pub density: f64,
    pub masks: Vec<(ParamId, Mask)>,
    pub final_state: OptimizerState,
}

fn finish(records: Vec<PathRecord>, density: f64, masks: Vec<(ParamId, Mask)>, state: OptimizerState) -> RetrainResult {
    let last = records.last().expect("a retrain records its starting epoch");
    RetrainResult {
        final_val_loss: last.val_loss,
        final_val_acc: last.val_acc,
        records,
        density,
        masks,
        final_state: state,
    }
}

/// Support masks at the mask epoch; refuses any layer whose mask keeps nothing.
pub fn masks_from(state: &OptimizerState) -> Result<Vec<(ParamId, Mask)>> {
    let masks = path::state_masks(state)?;
    if masks.is_empty() {
        return Err(Error::DegenerateMask("the run has no split weights to take a support from".into()));
    }
    let empty: Vec<String> =
        masks.iter().filter(|(_, m)| m.num_active() == 0).map(|(id, _)| id.layer.to_string()).collect();
    if !empty.is_empty() {
        return Err(Error::DegenerateMask(format!("empty support on layer(s) {}; retrain refused", empty.join(", "))));
    }
    Ok(masks)
}

fn mask_density(masks: &[(ParamId, Mask)]) -> f64 {
    let (kept, total) = masks.iter().fold((0.0, 0usize), |(k, t), (_, m)| {
        let n = m.grouping().group_index().len();
        (k + m.density() * n as f64, t + n)
    });
    if total == 0 {
        1.0
    } else {
        kept / total as f64
    }
}

/// Trains `net` under `masks` for epochs `start..end` with the configured variant.
fn train_masked(
    cfg: &ExperimentConfig,
    run: &RunResult,
    net: Network,
    masks: &[(ParamId, Mask)],
    start: usize,
    end: usize,
) -> Result<(Vec<PathRecord>, OptimizerState)> {
    let hp = cfg.hyper_params();
    let split = if cfg.run.retrain_with_split { cfg.split.build(&net, hp.lambda)? } else { SplitPolicy::none() };
    let mut state = OptimizerState::new(net, &split, lr_schedule(&hp, start))?;
    state.set_masks(masks.iter().map(|(id, m)| (*id, m.materialize())).collect())?;
    let looper = Loop { cfg, hp: &hp, train: &run.train, val: &run.val, checkpoint_at: &[] };
    let output = looper.run(&mut state, start, end, None);
    match output.failure {
        Some(e) => Err(e),
        None => Ok((output.records, state)),
    }
}

/// Retrains from a finished run's checkpoints under `plan`.
pub fn retrain_from_run(cfg: &ExperimentConfig, run: &RunResult, plan: &RetrainPlan) -> Result<RetrainResult> {
    plan.validate()?;
    let source = run.checkpoints.get(&plan.mask_epoch).ok_or(Error::MissingCheckpoint(plan.mask_epoch))?;
    let masks = masks_from(source)?;
    let net = match plan.init {
        InitPolicy::SameInit => run.initial.clone(),
        InitPolicy::Rewind(e) => run.checkpoints.get(&e).ok_or(Error::MissingCheckpoint(e))?.net.clone(),
    };
    let (records, state) = train_masked(cfg, run, net, &masks, plan.start_epoch(), plan.epochs)?;
    let density = mask_density(&masks);
    Ok(finish(records, density, masks, state))
}

/// Dense reference: the same initialization and budget with splitting disabled.
pub fn dense_from_run(cfg: &ExperimentConfig, run: &RunResult, epochs: usize) -> Result<RetrainResult> {
    let (records, state) = train_masked(cfg, run, run.initial.clone(), &[], 0, epochs)?;
    Ok(finish(records, 1.0, Vec::new(), state))
}

fn source_run(cfg: &ExperimentConfig, plan: &RetrainPlan) -> Result<RunResult> {
    plan.validate()?;
    let mut base = cfg.clone();
    let needed = plan.required_epochs();
    base.run.epochs = *needed.last().expect("at least the mask epoch");
    base.run.checkpoint_epochs = needed;
    train(&base, None)
}

/// One-shot pruning: support of `Gamma` at the mask epoch, weights reset to the
/// original initialization, then `T` epochs of masked training. Returns the dense
/// reference and the pruned result.
pub fn one_shot_prune_retrain(cfg: &ExperimentConfig, plan: &RetrainPlan) -> Result<(RetrainResult, RetrainResult)> {
    let plan = RetrainPlan { init: InitPolicy::SameInit, ..*plan };
    let run = source_run(cfg, &plan)?;
    let sparse = retrain_from_run(cfg, &run, &plan)?;
    let dense = dense_from_run(cfg, &run, plan.epochs)?;
    Ok((dense, sparse))
}

/// Rewind fine-tuning: weights from epoch `e'`, mask from the mask epoch, then the
/// remaining `T - e'` epochs of masked training.
pub fn fine_tune_rewind(cfg: &ExperimentConfig, plan: &RetrainPlan) -> Result<RetrainResult> {
    let run = source_run(cfg, plan)?;
    retrain_from_run(cfg, &run, plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgdVariant {
    Naive,
    L1,
    Mom,
    MomWd,
    Nesterov,
}

#[derive(Debug, Clone)]
pub struct Baseline {
    pub records: Vec<PathRecord>,
    pub net: Network,
}

/// Plain SGD baselines at learning rate `kappa * alpha(epoch)`, sharing the batch
/// order of DessiLBI runs with the same seed.
///
/// * `l1` adds `L1_COEFF * sign(W)` to weight gradients;
/// * `mom`: `v = tau v + g`, `W -= lr v`;
/// * `mom_wd`: as `mom`, then `W -= beta W_t`;
/// * `nesterov`: `v = tau v + g`, `W -= lr (g + tau v)`.
pub fn sgd_baseline(cfg: &ExperimentConfig, variant: SgdVariant) -> Result<Baseline> {
    cfg.validate()?;
    let hp = cfg.hyper_params();
    let (train, val, net) = prepare(cfg)?;
    let mut state = OptimizerState::new(net, &SplitPolicy::none(), lr_schedule(&hp, 0))?;
    let ids = state.net.param_ids();
    let mut velocity: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(state.net.param(id).shape())).collect();
    let full = is_full_batch(cfg, &train);
    let mut records = vec![record_epoch(&state, &train, &val, 0)?];
    let tau = hp.momentum;
    for epoch in 0..cfg.run.epochs {
        let lr = hp.kappa * lr_schedule(&hp, epoch);
        for rows in batches(train.len(), cfg.run.batch_size, cfg.run.seed, epoch) {
            let (x, y) = if full {
                (train.x.clone(), train.y.clone())
            } else {
                (train.x.select_rows(&rows), train.y.select_rows(&rows))
            };
            let (loss, grads) = state.net.loss_and_grads(&x, &y)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, reason: format!("non-finite loss or gradient ({loss})") });
            }
            for ((&id, mut g), v) in ids.iter().zip(grads).zip(velocity.iter_mut()) {
                if variant == SgdVariant::L1 && id.is_weight() {
                    let w = state.net.param(id).clone();
                    g = g.zip_map(&w, |gi, wi| gi + L1_COEFF * sign(wi));
                }
                let w = state.net.param_mut(id);
                match variant {
                    SgdVariant::Naive | SgdVariant::L1 => w.axpy(-lr, &g),
                    SgdVariant::Mom | SgdVariant::MomWd => {
                        *v = v.scale(tau);
                        v.axpy(1.0, &g);
                        let before = w.clone();
                        w.axpy(-lr, v);
                        if variant == SgdVariant::MomWd {
                            w.axpy(-hp.weight_decay, &before);
                        }
                    }
                    SgdVariant::Nesterov => {
                        *v = v.scale(tau);
                        v.axpy(1.0, &g);
                        w.axpy(-lr, &g);
                        w.axpy(-lr * tau, v);
                    }
                }
            }
        }
        records.push(record_epoch(&state, &train, &val, epoch + 1)?);
    }
    Ok(Baseline { records, net: state.net })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Probability that a truly relevant feature enters no later than an irrelevant
/// one, ties counting one half; never-entering features enter last.
pub fn entry_auc(entries: &[Option<usize>], truth: &[bool]) -> Result<f64> {
    if entries.len() != truth.len() {
        return Err(Error::Shape(format!("{} entry times for {} features", entries.len(), truth.len())));
    }
    let key = |e: &Option<usize>| e.map_or(u128::MAX, |v| v as u128);
    let pos: Vec<u128> = entries.iter().zip(truth).filter(|(_, &t)| t).map(|(e, _)| key(e)).collect();
    let neg: Vec<u128> = entries.iter().zip(truth).filter(|(_, &t)| !t).map(|(e, _)| key(e)).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("support recovery needs both relevant and irrelevant features".into()));
    }
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            wins += if a < b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Area under the true-positive / false-positive curve traced as the support of
/// `Gamma` grows along the path, scored against the support of `beta*`.
pub fn support_recovery_score(records: &[PathRecord], beta_star: &[f64]) -> Result<f64> {
    let entries = inverse_scale_order(records)?;
    let first_layer = entries.first().map(|e| e.layer);
    let times: Vec<Option<usize>> = entries.iter().filter(|e| Some(e.layer) == first_layer).map(|e| e.epoch).collect();
    if times.len() != beta_star.len() {
        return Err(Error::InvalidArgument(format!(
            "support recovery needs a linear model with one group per coefficient: {} groups for {} coefficients",
            times.len(),
            beta_star.len()
        )));
    }
    let truth: Vec<bool> = beta_star.iter().map(|b| *b != 0.0).collect();
    entry_auc(&times, &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub kappa: f64,
    pub nu: f64,
    pub seed: u64,
    /// Fraction of nonzero `Gamma` entries at the end of training.
    pub final_sparsity: f64,
    /// Best validation accuracy of the full model along the path.
    pub dense_best_acc: Option<f64>,
    /// Best validation accuracy of the model projected onto the support of `Gamma`.
    pub sparse_best_acc: Option<f64>,
}

/// Trains every `(kappa, nu, seed)` cell. With `kappa_alpha` set, the step size is
/// `kappa_alpha / kappa` so that the effective learning rate stays fixed.
pub fn ablation(
    cfg: &ExperimentConfig,
    kappas: &[f64],
    nus: &[f64],
    seeds: &[u64],
    kappa_alpha: Option<f64>,
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for &kappa in kappas {
        for &nu in nus {
            for &seed in seeds {
                let mut c = cfg.clone();
                c.optimizer.kappa = kappa;
                c.optimizer.nu = nu;
                c.run.seed = seed;
                c.run.monitor = false;
                if let Some(ka) = kappa_alpha {
                    c.optimizer.alpha = ka / kappa;
                    if let Some(m) = c.optimizer.alpha_milestones.as_mut() {
                        let scale = ka / kappa / m[0].1;
                        m.iter_mut().for_each(|p| p.1 *= scale);
                    }
                }
                let run = train(&c, None)?;
                let best = |f: fn(&PathRecord) -> Option<f64>| {
                    run.records.iter().filter_map(f).fold(None, |m: Option<f64>, a| Some(m.map_or(a, |b| b.max(a))))
                };
                cells.push(AblationCell {
                    kappa,
                    nu,
                    seed,
                    final_sparsity: run.records.last().map_or(0.0, PathRecord::overall_sparsity),
                    dense_best_acc: best(|r| r.val_acc),
                    sparse_best_acc: best(|r| r.sparse_val_acc),
                });
            }
        }
    }
    Ok(cells)
}

/// Mean of `final_sparsity` over seeds for every `(kappa, nu)` pair, in grid order.
pub fn mean_sparsity(cells: &[AblationCell]) -> Vec<(f64, f64, f64)> {
    let mut out: Vec<(f64, f64, f64, usize)> = Vec::new();
    for c in cells {
        match out.iter_mut().find(|o| o.0 == c.kappa && o.1 == c.nu) {
            Some(o) => {
                o.2 += c.final_sparsity;
                o.3 += 1;
            }
            None => out.push((c.kappa, c.nu, c.final_sparsity, 1)),
        }
    }
    out.into_iter().map(|(k, n, s, c)| (k, n, s / c as f64)).collect()
}
