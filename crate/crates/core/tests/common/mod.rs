#![allow(dead_code)]

use dessilbi::config::{parse_config, ExperimentConfig};

/// MLP with two hidden layers of width 64 on four Gaussian blobs in 20 dimensions.
pub fn blobs_mlp(seed: u64, lambda: f64, epochs: usize) -> ExperimentConfig {
    parse_config(&format!(
        r#"
[dataset]
kind = "blobs"
n = 1000
classes = 4
dim = 20
separation = 0.5
train_fraction = 0.6

[network]
input = [20]
loss = "softmax_cross_entropy"
layers = [
  {{ kind = "dense", inputs = 20, outputs = 64 }},
  {{ kind = "activation", fn = "relu" }},
  {{ kind = "dense", inputs = 64, outputs = 64 }},
  {{ kind = "activation", fn = "relu" }},
  {{ kind = "dense", inputs = 64, outputs = 4 }},
]

[optimizer]
kappa = 1.0
nu = 10.0
alpha = 0.1
alpha_drop_every = 30
alpha_drop_factor = 0.1
lambda = {lambda}
variant = "mom"

[run]
epochs = {epochs}
batch_size = 32
seed = {seed}
"#
    ))
    .expect("blobs config parses")
}

/// Linear model without bias on `sparse_linear` data, trained full batch.
pub fn sparse_linear(seed: u64, epochs: usize) -> ExperimentConfig {
    parse_config(&format!(
        r#"
[dataset]
kind = "sparse_linear"
n = 200
p = 50
s = 5
snr = 10.0

[network]
input = [50]
loss = "mse"
layers = [{{ kind = "dense", inputs = 50, outputs = 1, bias = false }}]

[optimizer]
kappa = 1.0
nu = 10.0
alpha = 0.3
alpha_drop_factor = 1.0
lambda = 1.0
variant = "naive"

[run]
epochs = {epochs}
batch_size = 0
seed = {seed}
"#
    ))
    .expect("sparse linear config parses")
}

/// Generating coefficients of a sparse-linear configuration.
pub fn beta_star(cfg: &ExperimentConfig) -> Vec<f64> {
    let (train, _) = cfg.dataset.build(cfg.run.seed).expect("dataset builds");
    train.beta_star.expect("sparse linear data carries beta*")
}
