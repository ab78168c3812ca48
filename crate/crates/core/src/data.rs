//! Synthetic generators, the IDX image loader, and train/validation splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs, targets and, for sparse regression, the generating coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    /// `[n, 1]` regression targets or `[n]` class labels stored as `f64`.
    pub y: Tensor,
    pub beta_star: Option<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset { x: self.x.select_rows(rows), y: self.y.select_rows(rows), beta_star: self.beta_star.clone() }
    }

    /// Deterministic shuffled split; `train_fraction` of the rows go to the first part.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(Error::config("dataset.train_fraction", format!("must lie in (0, 1], got {train_fraction}")));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((n as f64) * train_fraction).round() as usize;
        let cut = cut.clamp(1, n);
        let train = self.subset(&idx[..cut]);
        let val = if cut < n { self.subset(&idx[cut..]) } else { train.clone() };
        Ok((train, val))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Sparse linear regression: rows of `X` are standard normal with pairwise
/// correlation `correlation`, `beta*` has `s` nonzeros with magnitudes
/// `1, 2, ..., s` at random positions and random signs, and
/// `y = X beta* + eps` with `Var(X beta*) / Var(eps) = snr`. `snr = inf` gives no noise;
/// `s = 0` gives unit-variance noise.
pub fn gen_sparse_linear(n: usize, p: usize, s: usize, snr: f64, correlation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || p == 0 {
        return Err(Error::config("dataset.n", format!("n and p must be positive, got n = {n}, p = {p}")));
    }
    if s > p {
        return Err(Error::config("dataset.s", format!("support size {s} exceeds dimension {p}")));
    }
    if !(snr > 0.0) {
        return Err(Error::config("dataset.snr", format!("must be > 0, got {snr}")));
    }
    if !(0.0..1.0).contains(&correlation) {
        return Err(Error::config("dataset.correlation", format!("must lie in [0, 1), got {correlation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..p).collect();
    positions.shuffle(&mut rng);
    let mut beta = vec![0.0; p];
    for (rank, &j) in positions[..s].iter().enumerate() {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        beta[j] = sign * (rank + 1) as f64;
    }

    let (a, b) = ((1.0 - correlation).sqrt(), correlation.sqrt());
    let mut x = Vec::with_capacity(n * p);
    for _ in 0..n {
        let shared = normal(&mut rng);
        for _ in 0..p {
            x.push(a * normal(&mut rng) + b * shared);
        }
    }
    let signal_var =
        (1.0 - correlation) * beta.iter().map(|v| v * v).sum::<f64>() + correlation * beta.iter().sum::<f64>().powi(2);
    let sigma = if s == 0 {
        1.0
    } else if snr.is_infinite() {
        0.0
    } else {
        (signal_var / snr).sqrt()
    };
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * p..(i + 1) * p];
        let clean: f64 = row.iter().zip(&beta).map(|(u, v)| u * v).sum();
        let eps = normal(&mut rng);
        y.push(clean + sigma * eps);
    }
    Ok(Dataset { x: Tensor::new(vec![n, p], x)?, y: Tensor::new(vec![n, 1], y)?, beta_star: Some(beta) })
}

/// Gaussian blobs: class means drawn from `N(0, separation^2 I)`, samples add unit noise.
/// Labels are balanced and returned as an `[n]` tensor of class indices.
pub fn gen_blobs(n: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || dim == 0 || classes < 2 {
        return Err(Error::config(
            "dataset",
            format!("blobs need n, dim > 0 and >= 2 classes (n = {n}, dim = {dim}, classes = {classes})"),
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::config("dataset.separation", format!("must be > 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dim).map(|_| separation * normal(&mut rng)).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut x = Vec::with_capacity(n * dim);
    for &c in &labels {
        for d in 0..dim {
            x.push(centers[c * dim + d] + normal(&mut rng));
        }
    }
    Ok(Dataset {
        x: Tensor::new(vec![n, dim], x)?,
        y: Tensor::new(vec![n], labels.into_iter().map(|c| c as f64).collect())?,
        beta_star: None,
    })
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes.get(offset..offset + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]])).ok_or_else(|| Error::Format {
        what,
        offset,
        reason: format!("truncated header: need 4 bytes, file has {}", bytes.len()),
    })
}

fn check_magic(bytes: &[u8], expected: u32, what: &'static str) -> Result<()> {
    let found = read_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::Format {
            what,
            offset: 0,
            reason: format!("bad magic: expected {expected:#010x}, found {found:#010x}"),
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, what: &'static str) -> Result<&'a [u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::Format {
        what,
        offset: bytes.len(),
        reason: format!("truncated payload: expected {len} bytes from offset {start}"),
    })
}

/// Parses an IDX3 image file into `[n, rows * cols]` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    const WHAT: &str = "IDX images";
    check_magic(bytes, IDX_IMAGES, WHAT)?;
    let n = read_u32(bytes, 4, WHAT)? as usize;
    let rows = read_u32(bytes, 8, WHAT)? as usize;
    let cols = read_u32(bytes, 12, WHAT)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            what: WHAT,
            offset: 4,
            reason: format!("zero dimension in {n} x {rows} x {cols}"),
        });
    }
    let data = payload(bytes, 16, n * rows * cols, WHAT)?;
    Tensor::new(vec![n, rows * cols], data.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Parses an IDX1 label file into an `[n]` tensor.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Tensor> {
    const WHAT: &str = "IDX labels";
    check_magic(bytes, IDX_LABELS, WHAT)?;
    let n = read_u32(bytes, 4, WHAT)? as usize;
    if n == 0 {
        return Err(Error::Format { what: WHAT, offset: 4, reason: "zero items".into() });
    }
    let data = payload(bytes, 8, n, WHAT)?;
    Tensor::new(vec![n], data.iter().map(|&b| b as f64).collect())
}

/// Loads an image/label IDX pair, optionally keeping only the first `limit` items.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let img_bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab_bytes = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let x = parse_idx_images(&img_bytes)?;
    let y = parse_idx_labels(&lab_bytes)?;
    if x.shape()[0] != y.shape()[0] {
        return Err(Error::Shape(format!("{} images but {} labels", x.shape()[0], y.shape()[0])));
    }
    let ds = Dataset { x, y, beta_star: None };
    Ok(match limit {
        Some(m) if m < ds.len() => ds.subset(&(0..m).collect::<Vec<_>>()),
        _ => ds,
    })
}
