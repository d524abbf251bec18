//! Switchable Normalization.
//!
//! The layer normalizes with a convex mixture of IN, LN and BN statistics:
//!
//! ```text
//! mu     = w_in  mu_in  + w_ln  mu_ln  + w_bn  mu_bn
//! var    = w'_in var_in + w'_ln var_ln + w'_bn var_bn
//! y      = gamma (x - mu) / sqrt(var + eps) + beta
//! ```
//!
//! where `w = softmax(lambda_mu)` and `w' = softmax(lambda_sigma)`. LN and BN
//! moments are derived from IN moments (see [`crate::stats`]).
//!
//! A batch may be split into partitions that simulate devices. IN and LN
//! statistics are always per partition; BN statistics are pooled over all
//! partitions. The single-device functions are the one-partition case of
//! the same code.

use serde::{Deserialize, Serialize};

use crate::baseline::{MovingStats, Phase, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::error::{Result, SnError};
use crate::stats::{in_stats, ln_stats_from_in, ChannelMoments, PartitionedBatch, Signature, StatPair};
use crate::tensor::Tensor4;

/// Slot order used by every 3-vector in this module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Normalizer {
    In = 0,
    Ln = 1,
    Bn = 2,
}

impl Normalizer {
    pub const ALL: [Normalizer; 3] = [Normalizer::In, Normalizer::Ln, Normalizer::Bn];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Normalizer::In => "in",
            Normalizer::Ln => "ln",
            Normalizer::Bn => "bn",
        }
    }

    /// First index of the maximum; ties go to the earlier slot.
    pub fn argmax(v: &[f64; 3]) -> Normalizer {
        let mut best = 0;
        for k in 1..3 {
            if v[k] > v[best] {
                best = k;
            }
        }
        Normalizer::ALL[best]
    }

    fn one_hot(self) -> [f64; 3] {
        let mut w = [0.0; 3];
        w[self.index()] = 1.0;
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardSelection {
    pub mu: Normalizer,
    pub sigma: Normalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBn {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Learnable state of one switchable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda_mu: [f64; 3],
    pub lambda_sigma: [f64; 3],
    pub eps: f64,
    pub frozen_bn: Option<FrozenBn>,
    /// When set, the effective weights are one-hot on these normalizers
    /// and `lambda_*` are ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard: Option<HardSelection>,
}

impl SnParams {
    /// gamma = 1, beta = 0, every lambda = 1 (uniform ratios).
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_eps(channels, DEFAULT_EPS)
    }

    pub fn with_eps(channels: usize, eps: f64) -> Result<Self> {
        if channels == 0 {
            return Err(SnError::Dimension("channel count must be >= 1".into()));
        }
        if !(eps > 0.0) {
            return Err(SnError::Argument(format!("eps must be > 0, got {eps}")));
        }
        Ok(Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            lambda_mu: [1.0; 3],
            lambda_sigma: [1.0; 3],
            eps,
            frozen_bn: None,
            hard: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// gamma and beta per channel plus six control parameters.
    pub fn learnable_count(&self) -> usize {
        self.gamma.len() + self.beta.len() + self.lambda_mu.len() + self.lambda_sigma.len()
    }

    pub fn effective_weights(&self) -> Result<ImportanceWeights> {
        Ok(match self.hard {
            Some(sel) => ImportanceWeights {
                w_mu: sel.mu.one_hot(),
                w_sigma: sel.sigma.one_hot(),
            },
            None => ImportanceWeights {
                w_mu: softmax_weights(self.lambda_mu)?,
                w_sigma: softmax_weights(self.lambda_sigma)?,
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: SnParams = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if c == 0 || self.beta.len() != c {
            return Err(SnError::Contract("gamma and beta must be nonempty and equally long".into()));
        }
        if !(self.eps > 0.0) {
            return Err(SnError::Argument(format!("eps must be > 0, got {}", self.eps)));
        }
        if let Some(f) = &self.frozen_bn {
            if f.mu.len() != c || f.var.len() != c {
                return Err(SnError::Contract("frozen BN statistics must have one entry per channel".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub w_mu: [f64; 3],
    pub w_sigma: [f64; 3],
}

/// Max-shifted softmax over three control parameters.
pub fn softmax_weights(lambda: [f64; 3]) -> Result<[f64; 3]> {
    if lambda.iter().any(|v| !v.is_finite()) {
        return Err(SnError::Argument(format!("non-finite control parameters {lambda:?}")));
    }
    let m = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = lambda.map(|v| (v - m).exp());
    let z: f64 = e.iter().sum();
    Ok(e.map(|v| v / z))
}

/// Gradients of one layer for one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub dx: Tensor4,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
    pub dlambda_mu: [f64; 3],
    pub dlambda_sigma: [f64; 3],
}

/// Gradients of one layer over a partitioned batch. Parameter gradients are
/// totals over every partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncGrads {
    pub dx: Vec<Tensor4>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
    pub dlambda_mu: [f64; 3],
    pub dlambda_sigma: [f64; 3],
}

#[derive(Debug, Clone)]
struct PartState {
    x: Tensor4,
    in_stats: StatPair,
    ln_stats: StatPair,
    /// Mixed variance per (n, c).
    var: Vec<f64>,
    xhat: Tensor4,
}

/// Intermediates saved by the forward pass.
#[derive(Debug, Clone)]
pub struct SnCache {
    parts: Vec<PartState>,
    bn: StatPair,
    weights: ImportanceWeights,
    phase: Phase,
    hard: bool,
    gamma: Vec<f64>,
    eps: f64,
}

impl SnCache {
    pub fn weights(&self) -> ImportanceWeights {
        self.weights
    }

    /// BN statistics used by the forward pass: minibatch (pooled over
    /// partitions) in training, frozen in evaluation.
    pub fn bn_stats(&self) -> &StatPair {
        &self.bn
    }

    pub fn in_stats(&self, part: usize) -> &StatPair {
        &self.parts[part].in_stats
    }

    pub fn ln_stats(&self, part: usize) -> &StatPair {
        &self.parts[part].ln_stats
    }

    /// Variance clamps on the reuse path during this forward.
    pub fn clamp_events(&self) -> usize {
        self.bn.clamp_events + self.parts.iter().map(|p| p.ln_stats.clamp_events).sum::<usize>()
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }
}

pub fn sn_forward(x: &Tensor4, params: &SnParams, phase: Phase) -> Result<(Tensor4, SnCache)> {
    let (mut ys, cache) = forward_parts(vec![x.clone()], params, phase)?;
    Ok((ys.pop().expect("one partition"), cache))
}

pub fn sn_forward_sync(
    batch: &PartitionedBatch,
    params: &SnParams,
    phase: Phase,
) -> Result<(Vec<Tensor4>, SnCache)> {
    forward_parts(batch.parts().to_vec(), params, phase)
}

fn forward_parts(parts: Vec<Tensor4>, params: &SnParams, phase: Phase) -> Result<(Vec<Tensor4>, SnCache)> {
    let c = params.channels();
    if parts.is_empty() {
        return Err(SnError::Argument("at least one partition is required".into()));
    }
    let d0 = parts[0].dims();
    for p in &parts {
        let d = p.dims();
        if d.c != c || (d.h, d.w) != (d0.h, d0.w) {
            return Err(SnError::Contract(format!(
                "input {d:?} does not match layer with {c} channels and spatial {}x{}",
                d0.h, d0.w
            )));
        }
    }
    let weights = params.effective_weights()?;

    let ins: Vec<StatPair> = parts.iter().map(in_stats).collect();
    let bn = match phase {
        Phase::Train => {
            let mut acc = ChannelMoments::new(c);
            for s in &ins {
                acc.absorb(s)?;
            }
            acc.finish()
        }
        Phase::Eval => {
            let f = params
                .frozen_bn
                .as_ref()
                .ok_or_else(|| SnError::State("evaluation needs frozen BN statistics".into()))?;
            if f.mu.len() != c || f.var.len() != c {
                return Err(SnError::Contract("frozen BN statistics have the wrong length".into()));
            }
            StatPair {
                mu: f.mu.clone(),
                var: f.var.clone(),
                signature: Signature::PerC { c },
                clamp_events: 0,
            }
        }
    };

    let [_, wm_ln, wm_bn] = weights.w_mu;
    let [_, ws_ln, ws_bn] = weights.w_sigma;
    let mut outputs = Vec::with_capacity(parts.len());
    let mut states = Vec::with_capacity(parts.len());
    for (x, ins) in parts.into_iter().zip(ins) {
        let d = x.dims();
        let lns = ln_stats_from_in(&ins)?;
        let mut var = Vec::with_capacity(d.n * c);
        let mut xhat = Tensor4::zeros(d)?;
        let mut y = Tensor4::zeros(d)?;
        for n in 0..d.n {
            for ch in 0..c {
                // Written as offsets from the IN statistics so that equal
                // statistics mix to exactly that value.
                let (mi, vi) = (ins.mu_at(n, ch), ins.var_at(n, ch));
                let m = mi + wm_ln * (lns.mu[n] - mi) + wm_bn * (bn.mu[ch] - mi);
                let v = vi + ws_ln * (lns.var[n] - vi) + ws_bn * (bn.var[ch] - vi);
                let inv = 1.0 / (v + params.eps).sqrt();
                let (g, b) = (params.gamma[ch], params.beta[ch]);
                let src = x.plane(n, ch);
                let out = y.plane_mut(n, ch);
                for (k, h) in xhat.plane_mut(n, ch).iter_mut().enumerate() {
                    *h = (src[k] - m) * inv;
                    out[k] = g * *h + b;
                }
                var.push(v);
            }
        }
        outputs.push(y);
        states.push(PartState {
            x,
            in_stats: ins,
            ln_stats: lns,
            var,
            xhat,
        });
    }
    Ok((
        outputs,
        SnCache {
            parts: states,
            bn,
            weights,
            phase,
            hard: params.hard.is_some(),
            gamma: params.gamma.clone(),
            eps: params.eps,
        },
    ))
}

pub fn sn_backward(cache: &SnCache, dy: &Tensor4) -> Result<GradBundle> {
    if cache.parts.len() != 1 {
        return Err(SnError::Contract(format!(
            "cache holds {} partitions; use sn_backward_sync",
            cache.parts.len()
        )));
    }
    let g = sn_backward_sync(cache, std::slice::from_ref(dy))?;
    let SyncGrads {
        mut dx,
        dgamma,
        dbeta,
        dlambda_mu,
        dlambda_sigma,
    } = g;
    Ok(GradBundle {
        dx: dx.pop().expect("one partition"),
        dgamma,
        dbeta,
        dlambda_mu,
        dlambda_sigma,
    })
}

/// Backward pass over every partition.
///
/// Per partition and (n, c), with `s = sqrt(var + eps)`:
///
/// ```text
/// dL/dvar = -gamma / (2 s^2) * sum_ij dy * xhat
/// dL/dmu  = -gamma / s       * sum_ij dy
/// ```
///
/// The input gradient is the direct term `gamma dy / s` plus, for each
/// normalizer, its weight times the derivative of its mean (and variance)
/// contracted with the matching `dL/dmu` (`dL/dvar`) summed over the
/// entries that share that statistic: the same (n, c) for IN, every channel
/// of the sample for LN, every sample of every partition for BN. In
/// evaluation the BN statistics are constants and contribute nothing.
pub fn sn_backward_sync(cache: &SnCache, dy_parts: &[Tensor4]) -> Result<SyncGrads> {
    if dy_parts.len() != cache.parts.len() {
        return Err(SnError::Contract(format!(
            "{} upstream gradients for {} partitions",
            dy_parts.len(),
            cache.parts.len()
        )));
    }
    for (dy, st) in dy_parts.iter().zip(&cache.parts) {
        dy.check_same_dims(&st.x)?;
    }
    let c = cache.gamma.len();
    let w = cache.weights;

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    // dL/dmu and dL/dvar of the mixed statistics, per partition, per (n, c).
    let mut dmu: Vec<Vec<f64>> = Vec::with_capacity(dy_parts.len());
    let mut dvar: Vec<Vec<f64>> = Vec::with_capacity(dy_parts.len());
    // Contractions of dL/dmu and dL/dvar with each normalizer's statistic.
    let mut g_mu = [0.0; 3];
    let mut g_var = [0.0; 3];
    // BN sums over every sample of every partition.
    let mut bn_dmu = vec![0.0; c];
    let mut bn_dvar = vec![0.0; c];
    let mut total_samples = 0usize;

    for (dy, st) in dy_parts.iter().zip(&cache.parts) {
        let d = st.x.dims();
        total_samples += d.n;
        let mut pm = Vec::with_capacity(d.n * c);
        let mut pv = Vec::with_capacity(d.n * c);
        for n in 0..d.n {
            for ch in 0..c {
                let k = n * c + ch;
                let inv2 = 1.0 / (st.var[k] + cache.eps);
                let (mut s_dy, mut s_dyh) = (0.0, 0.0);
                for (&g, &h) in dy.plane(n, ch).iter().zip(st.xhat.plane(n, ch)) {
                    s_dy += g;
                    s_dyh += g * h;
                }
                dgamma[ch] += s_dyh;
                dbeta[ch] += s_dy;
                let gamma = cache.gamma[ch];
                let dm = -gamma * inv2.sqrt() * s_dy;
                let dv = -0.5 * gamma * inv2 * s_dyh;
                pm.push(dm);
                pv.push(dv);

                g_mu[0] += dm * st.in_stats.mu[k];
                g_mu[1] += dm * st.ln_stats.mu[n];
                g_mu[2] += dm * cache.bn.mu[ch];
                g_var[0] += dv * st.in_stats.var[k];
                g_var[1] += dv * st.ln_stats.var[n];
                g_var[2] += dv * cache.bn.var[ch];
                bn_dmu[ch] += dm;
                bn_dvar[ch] += dv;
            }
        }
        dmu.push(pm);
        dvar.push(pv);
    }

    let bn_live = cache.phase == Phase::Train;
    let mut dx_parts = Vec::with_capacity(dy_parts.len());
    for (p, (dy, st)) in dy_parts.iter().zip(&cache.parts).enumerate() {
        let d = st.x.dims();
        let hw = d.plane() as f64;
        let in_count = hw;
        let ln_count = c as f64 * hw;
        let bn_count = total_samples as f64 * hw;
        let mut dx = Tensor4::zeros(d)?;
        for n in 0..d.n {
            let row = n * c..(n + 1) * c;
            let ln_dmu: f64 = dmu[p][row.clone()].iter().sum();
            let ln_dvar: f64 = dvar[p][row].iter().sum();
            let mu_ln = st.ln_stats.mu[n];
            for ch in 0..c {
                let k = n * c + ch;
                let inv = 1.0 / (st.var[k] + cache.eps).sqrt();
                let gamma = cache.gamma[ch];
                let mu_in = st.in_stats.mu[k];
                let mu_bn = cache.bn.mu[ch];

                // Mean back-flow is constant over the plane.
                let mut mean_term = w.w_mu[0] * dmu[p][k] / in_count + w.w_mu[1] * ln_dmu / ln_count;
                // Variance back-flow coefficients on (h - mu_k).
                let a_in = 2.0 * w.w_sigma[0] * dvar[p][k] / in_count;
                let a_ln = 2.0 * w.w_sigma[1] * ln_dvar / ln_count;
                let mut a_bn = 0.0;
                if bn_live {
                    mean_term += w.w_mu[2] * bn_dmu[ch] / bn_count;
                    a_bn = 2.0 * w.w_sigma[2] * bn_dvar[ch] / bn_count;
                }
                let src = st.x.plane(n, ch);
                let g = dy.plane(n, ch);
                for (k2, out) in dx.plane_mut(n, ch).iter_mut().enumerate() {
                    let h = src[k2];
                    *out = gamma * g[k2] * inv
                        + a_in * (h - mu_in)
                        + a_ln * (h - mu_ln)
                        + a_bn * (h - mu_bn)
                        + mean_term;
                }
            }
        }
        dx_parts.push(dx);
    }

    let (dlambda_mu, dlambda_sigma) = if cache.hard {
        ([0.0; 3], [0.0; 3])
    } else {
        (softmax_backward(w.w_mu, g_mu), softmax_backward(w.w_sigma, g_var))
    };
    Ok(SyncGrads {
        dx: dx_parts,
        dgamma,
        dbeta,
        dlambda_mu,
        dlambda_sigma,
    })
}

/// `dL/dlambda_a = w_a (g_a - sum_k w_k g_k)` for `g_k = dL/dw_k`.
fn softmax_backward(w: [f64; 3], g: [f64; 3]) -> [f64; 3] {
    let mean: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
    [w[0] * (g[0] - mean), w[1] * (g[1] - mean), w[2] * (g[2] - mean)]
}

/// Copy of `params` whose mean and variance each select the normalizer with
/// the largest control parameter. Ties resolve in the order in, ln, bn.
pub fn harden(params: &SnParams) -> SnParams {
    let mut out = params.clone();
    out.hard = Some(HardSelection {
        mu: Normalizer::argmax(&params.lambda_mu),
        sigma: Normalizer::argmax(&params.lambda_sigma),
    });
    out
}

pub const DIVERGENCE_FLOOR: f64 = 1e-12;

/// Symmetric KL divergence `KL(a||b) + KL(b||a)` between two ratio vectors.
/// Entries are floored at [`DIVERGENCE_FLOOR`] before use.
pub fn ratio_divergence(a: &[f64; 3], b: &[f64; 3]) -> Result<f64> {
    for v in [a, b] {
        let sum: f64 = v.iter().sum();
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(SnError::Argument(format!("{v:?} is not a probability vector")));
        }
    }
    let a = a.map(|x| x.max(DIVERGENCE_FLOOR));
    let b = b.map(|x| x.max(DIVERGENCE_FLOOR));
    let kl = |p: &[f64; 3], q: &[f64; 3]| -> f64 { (0..3).map(|k| p[k] * (p[k] / q[k]).ln()).sum() };
    Ok(kl(&a, &b) + kl(&b, &a))
}

/// A switchable layer together with its optional moving-average tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnLayer {
    pub params: SnParams,
    pub momentum: f64,
    pub moving: Option<MovingStats>,
}

impl SnLayer {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            params: SnParams::new(channels)?,
            momentum: DEFAULT_MOMENTUM,
            moving: Some(MovingStats {
                mu: vec![0.0; channels],
                var: vec![1.0; channels],
                initialized: false,
            }),
        })
    }

    pub fn without_tracking(channels: usize) -> Result<Self> {
        let mut l = Self::new(channels)?;
        l.moving = None;
        Ok(l)
    }

    /// Forward over partitions. In training, the pooled BN statistics are
    /// folded into the moving average when tracking is enabled.
    pub fn forward(&mut self, parts: Vec<Tensor4>, phase: Phase) -> Result<(Vec<Tensor4>, SnCache)> {
        let (y, cache) = forward_parts(parts, &self.params, phase)?;
        if phase == Phase::Train {
            self.track(cache.bn_stats());
        }
        Ok((y, cache))
    }

    /// Folds minibatch BN statistics into the moving average, if tracking.
    pub fn track(&mut self, bn: &StatPair) {
        if let Some(m) = self.moving.as_mut() {
            let p = self.momentum;
            for (old, &s) in m.mu.iter_mut().zip(&bn.mu) {
                *old = (1.0 - p) * *old + p * s;
            }
            for (old, &s) in m.var.iter_mut().zip(&bn.var) {
                *old = (1.0 - p) * *old + p * s;
            }
            m.initialized = true;
        }
    }

    /// Forward without any state change.
    pub fn forward_frozen(&self, parts: Vec<Tensor4>, phase: Phase) -> Result<(Vec<Tensor4>, SnCache)> {
        forward_parts(parts, &self.params, phase)
    }
}
