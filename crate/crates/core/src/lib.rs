//! Structural-sparsity training of small networks with a split linearized
//! Bregman iteration, plus the tooling to check its convergence theory and to
//! prune and retrain the sparse subnetworks it discovers.

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Convolution loops read better with explicit channel and pixel indices.
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod lasso;
pub mod monitor;
pub mod net;
pub mod optim;
pub mod path;
pub mod penalty;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use net::{Activation, LayerKind, LossKind, Network, ParamId};
pub use optim::{lr_schedule, stepsize_bound, AlphaSchedule, HyperParams, OptimizerState, SplitPolicy, Variant};
pub use penalty::{prox_oracle, GroupScheme, Grouping, Penalty};
pub use tensor::Tensor;
