//! Inverse-scale-space bookkeeping: sparsity, support masks, projection onto a
//! support, per-epoch path records and their export.
//!
//! "Nonzero" always means exactly `!= 0.0`; the proximal map produces exact
//! zeros, so no tolerance is involved.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{accuracy, LossKind};
use crate::optim::OptimizerState;
use crate::penalty::Grouping;
use crate::tensor::Tensor;

/// Version tag written into every CSV/JSON export.
pub const PATH_SCHEMA_VERSION: u32 = 1;

/// Fraction of entries that are exactly nonzero.
pub fn sparsity(gamma: &Tensor) -> f64 {
    gamma.count_nonzero() as f64 / gamma.len() as f64
}

/// Support of a split weight, stored per group.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grouping: Grouping,
    active: Vec<bool>,
}

impl Mask {
    pub fn new(grouping: Grouping, active: Vec<bool>) -> Result<Self> {
        if active.len() != grouping.num_groups() {
            return Err(Error::Grouping(format!("{} group flags for {} groups", active.len(), grouping.num_groups())));
        }
        Ok(Self { grouping, active })
    }

    pub fn all(grouping: Grouping, value: bool) -> Self {
        let active = vec![value; grouping.num_groups()];
        Self { grouping, active }
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn grouping(&self) -> &Grouping {
        &self.grouping
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// Fraction of coordinates kept.
    pub fn density(&self) -> f64 {
        let idx = self.grouping.group_index();
        idx.iter().filter(|&&g| self.active[g]).count() as f64 / idx.len() as f64
    }

    /// Per-coordinate form: 1.0 where the coordinate's group is active, else 0.0.
    pub fn materialize(&self) -> Tensor {
        let data = self.grouping.group_index().iter().map(|&g| if self.active[g] { 1.0 } else { 0.0 }).collect();
        Tensor { shape: self.grouping.shape().to_vec(), data }
    }
}

/// Marks each group active iff its norm in `gamma` is positive.
pub fn support_mask(gamma: &Tensor, grouping: &Grouping) -> Result<Mask> {
    grouping.covers(gamma)?;
    let active = grouping.group_norms(gamma).into_iter().map(|n| n > 0.0).collect();
    Mask::new(grouping.clone(), active)
}

/// `W * mask`, coordinate-wise.
pub fn project_model(w: &Tensor, mask: &Mask) -> Result<Tensor> {
    mask.grouping.covers(w).map_err(|_| {
        Error::Shape(format!("mask for {:?} applied to weight of shape {:?}", mask.grouping.shape(), w.shape()))
    })?;
    let data =
        w.data().iter().zip(mask.grouping.group_index()).map(|(&v, &g)| if mask.active[g] { v } else { 0.0 }).collect();
    Ok(Tensor { shape: w.shape().to_vec(), data })
}

/// Support masks of every split weight of the current state.
pub fn state_masks(state: &OptimizerState) -> Result<Vec<(crate::net::ParamId, Mask)>> {
    state.split_params().map(|(ps, c)| Ok((ps.id, support_mask(&c.gamma, &c.penalty.grouping)?))).collect()
}

/// Path statistics of one split weight at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub entries: usize,
    pub sparsity: f64,
    pub gamma_norms: Vec<f64>,
    pub weight_norms: Vec<f64>,
    pub support: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Present for classification losses only.
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    /// Loss and accuracy of the model projected onto the current support of `Gamma`.
    pub sparse_val_loss: f64,
    pub sparse_val_acc: Option<f64>,
    pub layers: Vec<LayerRecord>,
}

impl PathRecord {
    /// Fraction of nonzero `Gamma` entries over all split weights.
    pub fn overall_sparsity(&self) -> f64 {
        let total: usize = self.layers.iter().map(|l| l.entries).sum();
        if total == 0 {
            return 0.0;
        }
        self.layers.iter().map(|l| l.sparsity * l.entries as f64).sum::<f64>() / total as f64
    }
}

fn evaluate(net: &crate::net::Network, ds: &Dataset) -> Result<(f64, Option<f64>)> {
    let (loss, out) = net.forward(&ds.x, &ds.y)?;
    let acc = match net.loss {
        LossKind::SoftmaxCrossEntropy => Some(accuracy(&out, &ds.y)),
        LossKind::Mse => None,
    };
    Ok((loss, acc))
}

/// Evaluates the current iterate on the training and validation sets.
pub fn record_epoch(state: &OptimizerState, train: &Dataset, val: &Dataset, epoch: usize) -> Result<PathRecord> {
    let (train_loss, train_acc) = evaluate(&state.net, train)?;
    let (val_loss, val_acc) = evaluate(&state.net, val)?;
    let mut sparse = state.net.clone();
    let mut layers = Vec::new();
    for (ps, c) in state.split_params() {
        let g = &c.penalty.grouping;
        let mask = support_mask(&c.gamma, g)?;
        let w = state.net.param(ps.id);
        *sparse.param_mut(ps.id) = project_model(w, &mask)?;
        layers.push(LayerRecord {
            layer: ps.id.layer,
            entries: c.gamma.len(),
            sparsity: sparsity(&c.gamma),
            gamma_norms: g.group_norms(&c.gamma),
            weight_norms: g.group_norms(w),
            support: mask.active,
        });
    }
    let (sparse_val_loss, sparse_val_acc) = evaluate(&sparse, val)?;
    Ok(PathRecord { epoch, train_loss, val_loss, train_acc, val_acc, sparse_val_loss, sparse_val_acc, layers })
}

/// Entry epoch of one group along the path; `None` if it never became active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub layer: usize,
    pub group: usize,
    pub epoch: Option<usize>,
}

/// First epoch at which each group's `Gamma` norm became nonzero.
pub fn inverse_scale_order(records: &[PathRecord]) -> Result<Vec<GroupEntry>> {
    let first = records.first().ok_or_else(|| Error::InvalidArgument("no path records".into()))?;
    let mut out = Vec::new();
    for (li, layer) in first.layers.iter().enumerate() {
        for group in 0..layer.gamma_norms.len() {
            let epoch = records
                .iter()
                .find(|r| r.layers.get(li).and_then(|l| l.gamma_norms.get(group)).is_some_and(|&n| n > 0.0))
                .map(|r| r.epoch);
            out.push(GroupEntry { layer: layer.layer, group, epoch });
        }
    }
    Ok(out)
}

/// One row per epoch: losses, accuracies and per-layer sparsity.
pub fn write_path_csv<W: Write>(records: &[PathRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "schema".to_string(),
        "epoch".into(),
        "train_loss".into(),
        "train_acc".into(),
        "val_loss".into(),
        "val_acc".into(),
        "sparse_val_loss".into(),
        "sparse_val_acc".into(),
    ];
    if let Some(r) = records.first() {
        header.extend(r.layers.iter().map(|l| format!("sparsity_layer{}", l.layer)));
    }
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |a| format!("{a:e}"));
    for r in records {
        let mut row = vec![
            PATH_SCHEMA_VERSION.to_string(),
            r.epoch.to_string(),
            format!("{:e}", r.train_loss),
            opt(r.train_acc),
            format!("{:e}", r.val_loss),
            opt(r.val_acc),
            format!("{:e}", r.sparse_val_loss),
            opt(r.sparse_val_acc),
        ];
        row.extend(r.layers.iter().map(|l| format!("{:e}", l.sparsity)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("path csv", e))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct MagnitudeExport<'a> {
    schema: u32,
    records: std::borrow::Cow<'a, [PathRecord]>,
}

/// Full records, including per-group `Gamma` and `W` magnitudes, as versioned JSON.
pub fn write_path_json<W: Write>(records: &[PathRecord], out: W) -> Result<()> {
    let doc = MagnitudeExport { schema: PATH_SCHEMA_VERSION, records: std::borrow::Cow::Borrowed(records) };
    serde_json::to_writer_pretty(out, &doc)?;
    Ok(())
}

pub fn read_path_json(text: &str) -> Result<Vec<PathRecord>> {
    let doc: MagnitudeExport<'static> = serde_json::from_str(text)?;
    if doc.schema != PATH_SCHEMA_VERSION {
        return Err(Error::InvalidArgument(format!(
            "path export schema {} is not the supported version {PATH_SCHEMA_VERSION}",
            doc.schema
        )));
    }
    Ok(doc.records.into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_counts_exact_nonzeros() {
        assert_eq!(sparsity(&Tensor::zeros(&[10])), 0.0);
        let mut t = Tensor::zeros(&[10]);
        t.data_mut()[1] = 1e-300;
        t.data_mut()[4] = -2.0;
        t.data_mut()[9] = 3.0;
        assert_eq!(sparsity(&t), 0.3);
    }

    #[test]
    fn per_filter_mask_broadcasts() {
        let g = Grouping::per_filter(&[2, 1, 1, 2]).unwrap();
        let gamma = Tensor::new(vec![2, 1, 1, 2], vec![0.0, 0.0, 0.5, 0.0]).unwrap();
        let m = support_mask(&gamma, &g).unwrap();
        assert_eq!(m.active(), &[false, true]);
        assert_eq!(m.materialize().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(m.density(), 0.5);
        let w = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(project_model(&w, &m).unwrap().data(), &[0.0, 0.0, 3.0, 4.0]);
        assert!(project_model(&Tensor::zeros(&[4]), &m).is_err());
    }

    #[test]
    fn entry_order_flags_absent_groups() {
        let rec = |epoch, norms: Vec<f64>| PathRecord {
            epoch,
            train_loss: 0.0,
            val_loss: 0.0,
            train_acc: None,
            val_acc: None,
            sparse_val_loss: 0.0,
            sparse_val_acc: None,
            layers: vec![LayerRecord {
                layer: 0,
                entries: 3,
                sparsity: 0.0,
                support: norms.iter().map(|n| *n > 0.0).collect(),
                weight_norms: norms.clone(),
                gamma_norms: norms,
            }],
        };
        let recs = vec![rec(0, vec![1.0, 0.0, 0.0]), rec(1, vec![1.0, 0.0, 0.2])];
        let order = inverse_scale_order(&recs).unwrap();
        let epochs: Vec<_> = order.iter().map(|e| e.epoch).collect();
        assert_eq!(epochs, vec![Some(0), None, Some(1)]);
        assert!(inverse_scale_order(&[]).is_err());
    }
}
