//! Test-time BN statistics for SN layers.
//!
//! Batch average: freeze every parameter, push training minibatches through
//! the network in training mode, and average the per-minibatch BN means and
//! variances seen by each SN layer. Moving average: copy the statistics that
//! were tracked during training.

use crate::baseline::Phase;
use crate::error::{Result, SnError};
use crate::snlayer::{FrozenBn, SnLayer};
use crate::stats::StatPair;
use crate::tensor::Tensor4;
use crate::trainer::model::{PassMode, ToyModel};

/// Anything containing SN layers whose minibatch BN statistics can be observed.
pub trait SnNetwork {
    /// BN statistics seen by each SN layer, in layer order, when `batch` goes
    /// through the network in training mode. Must not change any state.
    fn observe(&self, batch: &Tensor4) -> Result<Vec<StatPair>>;

    fn sn_layers_mut(&mut self) -> Vec<&mut SnLayer>;
}

impl SnNetwork for SnLayer {
    fn observe(&self, batch: &Tensor4) -> Result<Vec<StatPair>> {
        let (_, cache) = self.forward_frozen(vec![batch.clone()], Phase::Train)?;
        Ok(vec![cache.bn_stats().clone()])
    }

    fn sn_layers_mut(&mut self) -> Vec<&mut SnLayer> {
        vec![self]
    }
}

impl SnNetwork for ToyModel {
    fn observe(&self, batch: &Tensor4) -> Result<Vec<StatPair>> {
        let mode = PassMode {
            phase: Phase::Train,
            sync: false,
        };
        Ok(self.forward(std::slice::from_ref(batch), mode)?.sn_bn_stats)
    }

    fn sn_layers_mut(&mut self) -> Vec<&mut SnLayer> {
        ToyModel::sn_layers_mut(self).collect()
    }
}

/// Running sums of minibatch BN statistics, one entry per SN layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchAverageAccumulator {
    sum_mu: Vec<Vec<f64>>,
    sum_var: Vec<Vec<f64>>,
    sum_mu_sq: Vec<Vec<f64>>,
    count: usize,
}

impl BatchAverageAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn absorb(&mut self, stats: &[StatPair]) -> Result<()> {
        if self.count == 0 {
            self.sum_mu = stats.iter().map(|s| vec![0.0; s.mu.len()]).collect();
            self.sum_var = self.sum_mu.clone();
            self.sum_mu_sq = self.sum_mu.clone();
        } else if stats.len() != self.sum_mu.len() || stats.iter().zip(&self.sum_mu).any(|(s, m)| s.mu.len() != m.len()) {
            return Err(SnError::Contract("statistics layout changed between minibatches".into()));
        }
        for (l, s) in stats.iter().enumerate() {
            for (c, (&mu, &var)) in s.mu.iter().zip(&s.var).enumerate() {
                self.sum_mu[l][c] += mu;
                self.sum_var[l][c] += var;
                self.sum_mu_sq[l][c] += mu * mu;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Mean of the minibatch means and of the minibatch variances. With
    /// `pooled`, the variance instead includes the spread of the minibatch
    /// means (mean of variances plus variance of means).
    pub fn finish(&self, pooled: bool) -> Result<Vec<FrozenBn>> {
        if self.count == 0 {
            return Err(SnError::State("no minibatch was absorbed".into()));
        }
        let k = self.count as f64;
        Ok((0..self.sum_mu.len())
            .map(|l| {
                let mu: Vec<f64> = self.sum_mu[l].iter().map(|s| s / k).collect();
                let var = self.sum_var[l]
                    .iter()
                    .zip(&self.sum_mu_sq[l])
                    .zip(&mu)
                    .map(|((v, sq), m)| {
                        let v = v / k;
                        if pooled {
                            v + (sq / k - m * m).max(0.0)
                        } else {
                            v
                        }
                    })
                    .collect();
                FrozenBn { mu, var }
            })
            .collect())
    }
}

/// Batch-average finalization over every minibatch yielded by `source`.
/// The resulting statistics are written into each SN layer and returned.
pub fn batch_average<M, I>(model: &mut M, source: I, pooled: bool) -> Result<Vec<FrozenBn>>
where
    M: SnNetwork + ?Sized,
    I: IntoIterator<Item = Tensor4>,
{
    let mut acc = BatchAverageAccumulator::new();
    for batch in source {
        acc.absorb(&model.observe(&batch)?)?;
    }
    if acc.count() == 0 {
        return Err(SnError::Argument("batch average needs at least one minibatch".into()));
    }
    let frozen = acc.finish(pooled)?;
    for (layer, f) in model.sn_layers_mut().into_iter().zip(&frozen) {
        layer.params.frozen_bn = Some(f.clone());
    }
    Ok(frozen)
}

/// Copies the tracked moving statistics into each SN layer's frozen slot.
pub fn moving_average_finalize<M: SnNetwork + ?Sized>(model: &mut M) -> Result<Vec<FrozenBn>> {
    let mut out = Vec::new();
    for (i, layer) in model.sn_layers_mut().into_iter().enumerate() {
        let m = match &layer.moving {
            Some(m) if m.initialized => m,
            Some(_) => return Err(SnError::State(format!("SN layer {i} never tracked a training step"))),
            None => return Err(SnError::State(format!("SN layer {i} has moving-average tracking disabled"))),
        };
        let f = FrozenBn {
            mu: m.mu.clone(),
            var: m.var.clone(),
        };
        layer.params.frozen_bn = Some(f.clone());
        out.push(f);
    }
    Ok(out)
}
