//! Plain IN / LN / BN / GN layers.
//!
//! Every mode is handled the same way: each (n, c) plane belongs to exactly
//! one normalization group, the group's moments are computed two-pass, and
//! the backward pass uses the closed form
//! `dx = (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) / sqrt(var + eps)`
//! inside each group. This is deliberately a different code path from the
//! switchable layer so the two can check each other.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SnError};
use crate::snlayer::GradBundle;
use crate::tensor::{Dims, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_GN_GROUPS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    In,
    Ln,
    Bn,
    Gn(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub mode: NormMode,
    pub momentum: f64,
    /// Present iff `mode == Bn`.
    pub moving: Option<MovingStats>,
    /// Set when a GN layer asked for more groups than channels and fell back to g = C.
    #[serde(default)]
    pub groups_clamped: bool,
}

impl BaselineParams {
    pub fn new(mode: NormMode, channels: usize) -> Result<Self> {
        Self::with_options(mode, channels, DEFAULT_EPS, DEFAULT_MOMENTUM)
    }

    pub fn with_options(mode: NormMode, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if channels == 0 {
            return Err(SnError::Dimension("channel count must be >= 1".into()));
        }
        if !(eps > 0.0) {
            return Err(SnError::Argument(format!("eps must be > 0, got {eps}")));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(SnError::Argument(format!("momentum must be in (0, 1], got {momentum}")));
        }
        let mut groups_clamped = false;
        let mode = match mode {
            NormMode::Gn(g) => {
                if g == 0 {
                    return Err(SnError::Argument("GN needs at least one group".into()));
                }
                let g = if channels < g {
                    groups_clamped = true;
                    channels
                } else {
                    g
                };
                if !channels.is_multiple_of(g) {
                    return Err(SnError::Argument(format!(
                        "{channels} channels are not divisible into {g} groups"
                    )));
                }
                NormMode::Gn(g)
            }
            m => m,
        };
        let moving = (mode == NormMode::Bn).then(|| MovingStats {
            mu: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        });
        Ok(Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
            mode,
            momentum,
            moving,
            groups_clamped,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Replaces the BN moving statistics, as if they had been tracked.
    pub fn inject_moving(&mut self, mu: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let c = self.channels();
        let moving = self
            .moving
            .as_mut()
            .ok_or_else(|| SnError::State("only BN layers carry moving statistics".into()))?;
        if mu.len() != c || var.len() != c {
            return Err(SnError::Contract("moving statistics must have one entry per channel".into()));
        }
        *moving = MovingStats {
            mu,
            var,
            initialized: true,
        };
        Ok(())
    }

    /// `m <- (1 - p) m + p s` for each channel.
    pub fn update_moving(&mut self, mu: &[f64], var: &[f64]) {
        let p = self.momentum;
        if let Some(m) = self.moving.as_mut() {
            for (old, &s) in m.mu.iter_mut().zip(mu) {
                *old = (1.0 - p) * *old + p * s;
            }
            for (old, &s) in m.var.iter_mut().zip(var) {
                *old = (1.0 - p) * *old + p * s;
            }
            m.initialized = true;
        }
    }
}

/// Plane-to-group assignment for a mode.
#[derive(Debug, Clone, Copy)]
struct Grouping {
    mode: NormMode,
    n: usize,
    c: usize,
}

impl Grouping {
    fn count(&self) -> usize {
        match self.mode {
            NormMode::In => self.n * self.c,
            NormMode::Ln => self.n,
            NormMode::Bn => self.c,
            NormMode::Gn(g) => self.n * g,
        }
    }

    #[inline]
    fn of(&self, n: usize, c: usize) -> usize {
        match self.mode {
            NormMode::In => n * self.c + c,
            NormMode::Ln => n,
            NormMode::Bn => c,
            NormMode::Gn(g) => n * g + c / (self.c / g),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineCache {
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    mode: NormMode,
    phase: Phase,
    dims: Dims,
    xhat: Tensor4,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BaselineLayer {
    pub params: BaselineParams,
}

impl BaselineLayer {
    pub fn new(mode: NormMode, channels: usize) -> Result<Self> {
        Ok(Self {
            params: BaselineParams::new(mode, channels)?,
        })
    }

    pub fn from_params(params: BaselineParams) -> Self {
        Self { params }
    }

    /// Forward pass. BN in `Train` also updates the moving statistics.
    pub fn forward(&mut self, x: &Tensor4, phase: Phase) -> Result<(Tensor4, BaselineCache)> {
        let (y, cache) = self.forward_frozen(x, phase)?;
        if let Some((mu, var)) = cache.batch_stats() {
            self.params.update_moving(mu, var);
        }
        Ok((y, cache))
    }

    /// Forward pass without touching the moving statistics.
    pub fn forward_frozen(&self, x: &Tensor4, phase: Phase) -> Result<(Tensor4, BaselineCache)> {
        let p = &self.params;
        let d = x.dims();
        if d.c != p.channels() {
            return Err(SnError::Contract(format!(
                "input has {} channels, layer has {}",
                d.c,
                p.channels()
            )));
        }
        if let NormMode::Gn(g) = p.mode {
            if !d.c.is_multiple_of(g) {
                return Err(SnError::Argument(format!("{} channels not divisible by {g}", d.c)));
            }
        }
        let grouping = Grouping { mode: p.mode, n: d.n, c: d.c };
        let use_moving = p.mode == NormMode::Bn && phase == Phase::Eval;

        let (mu, var) = if use_moving {
            let m = p.moving.as_ref().filter(|m| m.initialized).ok_or_else(|| {
                SnError::State("BN evaluation before moving statistics were initialised".into())
            })?;
            (m.mu.clone(), m.var.clone())
        } else {
            group_moments(x, grouping)
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
        let mut xhat = Tensor4::zeros(d)?;
        let mut y = Tensor4::zeros(d)?;
        for n in 0..d.n {
            for c in 0..d.c {
                let gi = grouping.of(n, c);
                let (m, s) = (mu[gi], inv_std[gi]);
                let (gamma, beta) = (p.gamma[c], p.beta[c]);
                let src = x.plane(n, c);
                let out = y.plane_mut(n, c);
                for (k, h) in xhat.plane_mut(n, c).iter_mut().enumerate() {
                    *h = (src[k] - m) * s;
                    out[k] = gamma * *h + beta;
                }
            }
        }
        let batch_stats = (p.mode == NormMode::Bn && phase == Phase::Train).then_some((mu, var));
        Ok((
            y,
            BaselineCache {
                batch_stats,
                mode: p.mode,
                phase,
                dims: d,
                xhat,
                inv_std,
                gamma: p.gamma.clone(),
            },
        ))
    }
}

impl BaselineCache {
    /// Minibatch BN statistics, for BN layers in training only.
    pub fn batch_stats(&self) -> Option<(&[f64], &[f64])> {
        self.batch_stats.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

fn group_moments(x: &Tensor4, grouping: Grouping) -> (Vec<f64>, Vec<f64>) {
    let d = x.dims();
    let groups = grouping.count();
    let mut sum = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    for n in 0..d.n {
        for c in 0..d.c {
            let gi = grouping.of(n, c);
            sum[gi] += x.plane(n, c).iter().sum::<f64>();
            count[gi] += d.plane();
        }
    }
    let mu: Vec<f64> = sum.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
    let mut sq = vec![0.0; groups];
    for n in 0..d.n {
        for c in 0..d.c {
            let gi = grouping.of(n, c);
            let m = mu[gi];
            sq[gi] += x.plane(n, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    let var = sq.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
    (mu, var)
}

pub fn baseline_backward(cache: &BaselineCache, dy: &Tensor4) -> Result<GradBundle> {
    let d = cache.dims;
    if dy.dims() != d {
        return Err(SnError::Contract(format!(
            "gradient shape {:?} does not match cached forward {:?}",
            dy.dims(),
            d
        )));
    }
    let grouping = Grouping { mode: cache.mode, n: d.n, c: d.c };
    let groups = grouping.count();

    let mut dgamma = vec![0.0; d.c];
    let mut dbeta = vec![0.0; d.c];
    // Per-group means of dxhat and dxhat * xhat.
    let mut g_sum = vec![0.0; groups];
    let mut g_dot = vec![0.0; groups];
    let mut g_count = vec![0usize; groups];
    for n in 0..d.n {
        for c in 0..d.c {
            let gi = grouping.of(n, c);
            let gamma = cache.gamma[c];
            for (&g, &h) in dy.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                dgamma[c] += g * h;
                dbeta[c] += g;
                g_sum[gi] += gamma * g;
                g_dot[gi] += gamma * g * h;
            }
            g_count[gi] += d.plane();
        }
    }

    let frozen_stats = cache.mode == NormMode::Bn && cache.phase == Phase::Eval;
    let mut dx = Tensor4::zeros(d)?;
    for n in 0..d.n {
        for c in 0..d.c {
            let gi = grouping.of(n, c);
            let gamma = cache.gamma[c];
            let s = cache.inv_std[gi];
            let k = g_count[gi] as f64;
            let (mean_g, mean_gh) = (g_sum[gi] / k, g_dot[gi] / k);
            let dyp = dy.plane(n, c);
            let xh = cache.xhat.plane(n, c);
            for ((out, &g), &h) in dx.plane_mut(n, c).iter_mut().zip(dyp).zip(xh) {
                *out = if frozen_stats {
                    gamma * g * s
                } else {
                    (gamma * g - mean_g - h * mean_gh) * s
                };
            }
        }
    }
    Ok(GradBundle {
        dx,
        dgamma,
        dbeta,
        dlambda_mu: [0.0; 3],
        dlambda_sigma: [0.0; 3],
    })
}
