//! Desk-scale training of a small CNN with pluggable normalization.

pub mod data;
pub mod model;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::baseline::Phase;
use crate::error::{Result, SnError};
use crate::inference::{batch_average, moving_average_finalize};
use crate::snlayer::{harden, ratio_divergence, HardSelection, ImportanceWeights};
use crate::tensor::{Rng, Tensor4};

pub use data::{make_dataset, nearest_template_accuracy, DatasetSpec, Split, SyntheticDataset};
pub use model::{cross_entropy, ModelSpec, NormKind, PassMode, ToyModel};
pub use optim::{Sgd, SgdConfig};

/// Loss above this is treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalizeMethod {
    BatchAverage,
    MovingAverage,
}

impl FinalizeMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "batch-average" | "batch_average" => Ok(Self::BatchAverage),
            "moving-average" | "moving_average" => Ok(Self::MovingAverage),
            _ => Err(SnError::Argument(format!("unknown finalize method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_per_partition: usize,
    pub partitions: usize,
    /// Pool BN statistics across partitions.
    pub sync: bool,
    pub epochs: usize,
    pub lr: f64,
    /// When set, the learning rate is `lr * total_batch / lr_ref_batch`.
    pub lr_ref_batch: Option<usize>,
    /// Epochs at whose start the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub finalize: FinalizeMethod,
    /// Minibatches used by batch-average finalization. Defaults to one pass
    /// over the training set.
    pub finalize_batches: Option<usize>,
    /// Minibatch size for batch-average finalization. Defaults to the
    /// per-partition training batch.
    pub finalize_batch_size: Option<usize>,
    pub finalize_pooled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_per_partition: 32,
            partitions: 1,
            sync: false,
            epochs: 10,
            lr: 0.1,
            lr_ref_batch: Some(32),
            decay_epochs: vec![7],
            decay_factor: 0.1,
            sgd: SgdConfig::default(),
            seed: 0,
            finalize: FinalizeMethod::BatchAverage,
            finalize_batches: None,
            finalize_batch_size: None,
            finalize_pooled: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SnError::Argument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(SnError::Argument(format!("decay factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.batch_per_partition == 0 || self.partitions == 0 {
            return Err(SnError::Argument("batch size and partition count must be positive".into()));
        }
        if self.lr_ref_batch == Some(0) || self.finalize_batches == Some(0) || self.finalize_batch_size == Some(0) {
            return Err(SnError::Argument("reference batch and finalize sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn total_batch(&self) -> usize {
        self.batch_per_partition * self.partitions
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let scale = self.lr_ref_batch.map_or(1.0, |r| self.total_batch() as f64 / r as f64);
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count() as i32;
        self.lr * scale * self.decay_factor.powi(decays)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatio {
    pub name: String,
    pub w_mu: [f64; 3],
    pub w_sigma: [f64; 3],
    /// Symmetric KL between the mean and variance ratios.
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub lr: f64,
    pub layers: Vec<LayerRatio>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub initial_layers: Vec<LayerRatio>,
    pub epochs: Vec<EpochRecord>,
    /// Argmax selection of every SN layer after each epoch.
    pub hard_snapshots: Vec<Vec<HardSelection>>,
    /// Accuracy on the eval split after finalization; absent when the model
    /// cannot be evaluated (divergence, or BN never tracked).
    pub final_eval_acc: Option<f64>,
    pub diverged: Option<DivergenceInfo>,
    #[serde(skip)]
    pub model: ToyModel,
}

impl TrainReport {
    /// Layer-averaged `w_bn` of the mean ratios in the last epoch (or initially).
    pub fn mean_bn_ratio(&self) -> Option<f64> {
        let layers = self.epochs.last().map_or(&self.initial_layers, |e| &e.layers);
        if layers.is_empty() {
            return None;
        }
        Some(layers.iter().map(|l| l.w_mu[2]).sum::<f64>() / layers.len() as f64)
    }
}

pub fn layer_ratios(model: &ToyModel) -> Result<Vec<LayerRatio>> {
    let names = model.layer_names();
    let mut out = Vec::new();
    for (name, norm) in names.into_iter().zip(&model.norms) {
        if let model::NormLayer::Switchable(l) = norm {
            let ImportanceWeights { w_mu, w_sigma } = l.params.effective_weights()?;
            out.push(LayerRatio {
                name,
                w_mu,
                w_sigma,
                divergence: ratio_divergence(&w_mu, &w_sigma)?,
            });
        }
    }
    Ok(out)
}

/// Builds a fresh model from `spec` (seeded by `cfg.seed`) and trains it.
pub fn train(spec: &ModelSpec, ds: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut spec = spec.clone();
    spec.in_channels = ds.spec.channels;
    spec.classes = ds.spec.classes;
    let model = ToyModel::new(spec, &mut Rng::new(cfg.seed).substream(10))?;
    train_model(model, ds, cfg)
}

/// Hardens every SN layer and continues training with λ frozen.
pub fn finetune_hard(model: &ToyModel, ds: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut model = model.clone();
    if model.sn_layers().next().is_none() {
        return Err(SnError::Argument("model has no SN layers to harden".into()));
    }
    for l in model.sn_layers_mut() {
        l.params = harden(&l.params);
    }
    let mut cfg = cfg.clone();
    cfg.sgd.freeze_lambda = true;
    train_model(model, ds, &cfg)
}

/// Copy of `model` ready for evaluation with the tracked moving statistics.
fn with_moving_stats(model: &ToyModel) -> Result<ToyModel> {
    let mut m = model.clone();
    if m.sn_layers().next().is_some() {
        moving_average_finalize(&mut m)?;
    }
    Ok(m)
}

/// Accuracy on `split` in eval mode. SN layers must carry frozen statistics.
pub fn evaluate(model: &ToyModel, split: &Split) -> Result<f64> {
    const CHUNK: usize = 64;
    let mode = PassMode {
        phase: Phase::Eval,
        sync: false,
    };
    let mut correct = 0;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = split.gather(chunk)?;
        let out = model.forward(&[x], mode)?;
        let (_, c, _) = cross_entropy(&out.logits, &[y], model.spec.classes);
        correct += c;
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Applies the configured finalization to a copy of `model`.
pub fn finalize(model: &ToyModel, ds: &SyntheticDataset, cfg: &TrainConfig) -> Result<ToyModel> {
    let mut m = model.clone();
    if m.sn_layers().next().is_none() {
        return Ok(m);
    }
    match cfg.finalize {
        FinalizeMethod::MovingAverage => {
            moving_average_finalize(&mut m)?;
        }
        FinalizeMethod::BatchAverage => {
            let bs = cfg.finalize_batch_size.unwrap_or(cfg.batch_per_partition);
            let count = cfg.finalize_batches.unwrap_or((ds.train.len() / bs).max(1));
            let mut rng = Rng::new(cfg.seed).substream(30);
            let batches = minibatch_indices(ds.train.len(), bs, count, &mut rng)
                .into_iter()
                .map(|ix| ds.train.gather(&ix).map(|(x, _)| x))
                .collect::<Result<Vec<Tensor4>>>()?;
            batch_average(&mut m, batches, cfg.finalize_pooled)?;
        }
    }
    Ok(m)
}

/// `count` minibatches of `size` indices, drawn from successive shuffled
/// passes over `0..len`.
fn minibatch_indices(len: usize, size: usize, count: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let per_pass = (len / size).max(1);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        for b in 0..per_pass {
            if out.len() == count {
                break;
            }
            out.push(order[b * size..((b + 1) * size).min(len)].to_vec());
        }
    }
    out
}

pub fn train_model(mut model: ToyModel, ds: &SyntheticDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let total = cfg.total_batch();
    if ds.train.len() < total {
        return Err(SnError::Argument(format!(
            "training split has {} samples, fewer than one batch of {total}",
            ds.train.len()
        )));
    }
    let mode = PassMode {
        phase: Phase::Train,
        sync: cfg.sync,
    };
    let mut opt = Sgd::new(cfg.sgd.clone());
    let root = Rng::new(cfg.seed);
    let steps = ds.train.len() / total;
    let mut report = TrainReport {
        initial_layers: layer_ratios(&model)?,
        epochs: Vec::with_capacity(cfg.epochs),
        hard_snapshots: Vec::with_capacity(cfg.epochs),
        final_eval_acc: None,
        diverged: None,
        model: model.clone(),
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        root.substream(100 + epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for step in 0..steps {
            let batch = &order[step * total..(step + 1) * total];
            let mut parts = Vec::with_capacity(cfg.partitions);
            let mut labels = Vec::with_capacity(cfg.partitions);
            for chunk in batch.chunks(cfg.batch_per_partition) {
                let (x, y) = ds.train.gather(chunk)?;
                parts.push(x);
                labels.push(y);
            }
            let out = model.forward(&parts, mode)?;
            let (loss, c, dl) = cross_entropy(&out.logits, &labels, model.spec.classes);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                report.diverged = Some(DivergenceInfo { epoch, step, loss });
                report.model = model;
                return Ok(report);
            }
            let grads = model.backward(&out.tape, &dl)?;
            opt.step(&mut model, &grads, lr)?;
            model.track_moving(&out.tape);
            loss_sum += loss;
            correct += c;
        }
        let eval_acc = evaluate(&with_moving_stats(&model)?, &ds.eval)?;
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / steps as f64,
            train_acc: correct as f64 / (steps * total) as f64,
            eval_acc,
            lr,
            layers: layer_ratios(&model)?,
        });
        report.hard_snapshots.push(
            model
                .sn_layers()
                .map(|l| harden(&l.params).hard.expect("harden sets a selection"))
                .collect(),
        );
    }

    let model = finalize(&model, ds, cfg)?;
    report.final_eval_acc = match evaluate(&model, &ds.eval) {
        Ok(acc) => Some(acc),
        Err(SnError::State(_)) if cfg.epochs == 0 => None,
        Err(e) => return Err(e),
    };
    report.model = model;
    Ok(report)
}
