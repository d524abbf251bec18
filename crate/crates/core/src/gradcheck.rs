//! Central-difference gradient checks for every layer.
//!
//! Each check builds a scalar loss `L = sum(r * y)` with a fixed random
//! projection `r`, evaluates it with forward passes only, and compares the
//! analytic gradient of every input coordinate and every parameter entry
//! against `(L(t + h) - L(t - h)) / 2h`.

use serde::Serialize;

use crate::baseline::{baseline_backward, BaselineLayer, NormMode, Phase};
use crate::error::Result;
use crate::snlayer::{sn_backward, sn_backward_sync, sn_forward, sn_forward_sync, FrozenBn, SnParams};
use crate::stats::PartitionedBatch;
use crate::tensor::{Dims, Rng, Tensor4};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub dims: Dims,
    pub step: f64,
    /// Input coordinates to check per tensor; all of them if the tensor is smaller.
    pub input_samples: usize,
    pub tolerance: f64,
    pub partitions: usize,
    /// Self-test hook: perturbs every analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dims: Dims::new(2, 3, 4, 5),
            step: 1e-5,
            input_samples: 200,
            tolerance: 1e-4,
            partitions: 2,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CheckReport {
    pub layer: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Running maximum of relative errors.
#[derive(Debug, Default)]
struct Tally {
    max: f64,
    count: usize,
}

impl Tally {
    fn add(&mut self, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        // NaN must fail the check, so it wins the max.
        if e.is_nan() || e > self.max {
            self.max = e;
        }
        self.count += 1;
    }

    fn report(self, layer: impl Into<String>, tol: f64) -> CheckReport {
        CheckReport {
            layer: layer.into(),
            max_rel_err: self.max,
            checked: self.count,
            pass: self.max <= tol,
        }
    }
}

fn corrupt(v: f64, on: bool) -> f64 {
    if on {
        v * 1.01 + 1e-3
    } else {
        v
    }
}

fn coordinates(len: usize, wanted: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if wanted < len {
        rng.shuffle(&mut idx);
        idx.truncate(wanted);
        idx.sort_unstable();
    }
    idx
}

fn central<F: FnMut(f64) -> Result<f64>>(mut loss_at: F, base: f64, step: f64) -> Result<f64> {
    let up = loss_at(base + step)?;
    let down = loss_at(base - step)?;
    Ok((up - down) / (2.0 * step))
}

/// Randomized SN parameters: non-uniform ratios, gamma away from 1.
pub fn random_sn_params(c: usize, rng: &mut Rng) -> Result<SnParams> {
    let mut p = SnParams::new(c)?;
    for g in &mut p.gamma {
        *g = 1.0 + 0.3 * rng.normal(0.0, 1.0);
    }
    for b in &mut p.beta {
        *b = rng.normal(0.0, 0.5);
    }
    for l in p.lambda_mu.iter_mut().chain(p.lambda_sigma.iter_mut()) {
        *l = rng.normal(0.0, 1.0);
    }
    Ok(p)
}

pub fn check_baseline(mode: NormMode, phase: Phase, cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = Rng::new(cfg.seed);
    let d = cfg.dims;
    let x = Tensor4::fill_normal(d, &mut rng, 0.2, 1.3)?;
    let r = Tensor4::fill_normal(d, &mut rng, 0.0, 1.0)?;
    let mut layer = BaselineLayer::new(mode, d.c)?;
    for g in &mut layer.params.gamma {
        *g = 1.0 + 0.3 * rng.normal(0.0, 1.0);
    }
    for b in &mut layer.params.beta {
        *b = rng.normal(0.0, 0.5);
    }
    if layer.params.moving.is_some() {
        let mu = (0..d.c).map(|_| rng.normal(0.0, 0.3)).collect();
        let var = (0..d.c).map(|_| 0.5 + rng.uniform()).collect();
        layer.params.inject_moving(mu, var)?;
    }

    let loss = |layer: &BaselineLayer, x: &Tensor4| -> Result<f64> {
        let (y, _) = layer.forward_frozen(x, phase)?;
        y.dot(&r)
    };
    let (_, cache) = layer.forward_frozen(&x, phase)?;
    let grads = baseline_backward(&cache, &r)?;

    let mut tally = Tally::default();
    for k in coordinates(d.len(), cfg.input_samples, &mut rng) {
        let base = x.data()[k];
        let num = central(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[k] = v;
                loss(&layer, &xp)
            },
            base,
            cfg.step,
        )?;
        tally.add(corrupt(grads.dx.data()[k], cfg.corrupt), num);
    }
    for c in 0..d.c {
        let num = central(
            |v| {
                let mut l = layer.clone();
                l.params.gamma[c] = v;
                loss(&l, &x)
            },
            layer.params.gamma[c],
            cfg.step,
        )?;
        tally.add(corrupt(grads.dgamma[c], cfg.corrupt), num);
        let num = central(
            |v| {
                let mut l = layer.clone();
                l.params.beta[c] = v;
                loss(&l, &x)
            },
            layer.params.beta[c],
            cfg.step,
        )?;
        tally.add(corrupt(grads.dbeta[c], cfg.corrupt), num);
    }
    let phase_tag = match phase {
        Phase::Train => "train",
        Phase::Eval => "eval",
    };
    Ok(tally.report(format!("{}-{phase_tag}", mode_name(mode)), cfg.tolerance))
}

pub fn mode_name(mode: NormMode) -> String {
    match mode {
        NormMode::In => "in".into(),
        NormMode::Ln => "ln".into(),
        NormMode::Bn => "bn".into(),
        NormMode::Gn(g) => format!("gn{g}"),
    }
}

/// Which scalar of an SN parameter set to perturb.
#[derive(Debug, Clone, Copy)]
enum SnSlot {
    Gamma(usize),
    Beta(usize),
    LambdaMu(usize),
    LambdaSigma(usize),
}

fn sn_slots(c: usize) -> Vec<SnSlot> {
    let mut v: Vec<SnSlot> = (0..c).map(SnSlot::Gamma).collect();
    v.extend((0..c).map(SnSlot::Beta));
    v.extend((0..3).map(SnSlot::LambdaMu));
    v.extend((0..3).map(SnSlot::LambdaSigma));
    v
}

fn slot_mut(p: &mut SnParams, s: SnSlot) -> &mut f64 {
    match s {
        SnSlot::Gamma(c) => &mut p.gamma[c],
        SnSlot::Beta(c) => &mut p.beta[c],
        SnSlot::LambdaMu(k) => &mut p.lambda_mu[k],
        SnSlot::LambdaSigma(k) => &mut p.lambda_sigma[k],
    }
}

fn slot_grad(s: SnSlot, dgamma: &[f64], dbeta: &[f64], dlm: &[f64; 3], dls: &[f64; 3]) -> f64 {
    match s {
        SnSlot::Gamma(c) => dgamma[c],
        SnSlot::Beta(c) => dbeta[c],
        SnSlot::LambdaMu(k) => dlm[k],
        SnSlot::LambdaSigma(k) => dls[k],
    }
}

/// Single-device SN check in the given phase. Evaluation uses random frozen statistics.
pub fn check_sn(phase: Phase, cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = Rng::new(cfg.seed ^ 0x5eed);
    let d = cfg.dims;
    let x = Tensor4::fill_normal(d, &mut rng, 0.2, 1.3)?;
    let r = Tensor4::fill_normal(d, &mut rng, 0.0, 1.0)?;
    let mut params = random_sn_params(d.c, &mut rng)?;
    if phase == Phase::Eval {
        params.frozen_bn = Some(FrozenBn {
            mu: (0..d.c).map(|_| rng.normal(0.0, 0.3)).collect(),
            var: (0..d.c).map(|_| 0.5 + rng.uniform()).collect(),
        });
    }
    let loss = |p: &SnParams, x: &Tensor4| -> Result<f64> {
        let (y, _) = sn_forward(x, p, phase)?;
        y.dot(&r)
    };
    let (_, cache) = sn_forward(&x, &params, phase)?;
    let g = sn_backward(&cache, &r)?;

    let mut tally = Tally::default();
    for k in coordinates(d.len(), cfg.input_samples, &mut rng) {
        let num = central(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[k] = v;
                loss(&params, &xp)
            },
            x.data()[k],
            cfg.step,
        )?;
        tally.add(corrupt(g.dx.data()[k], cfg.corrupt), num);
    }
    for s in sn_slots(d.c) {
        let mut p = params.clone();
        let base = *slot_mut(&mut p, s);
        let num = central(
            |v| {
                *slot_mut(&mut p, s) = v;
                loss(&p, &x)
            },
            base,
            cfg.step,
        )?;
        let a = slot_grad(s, &g.dgamma, &g.dbeta, &g.dlambda_mu, &g.dlambda_sigma);
        tally.add(corrupt(a, cfg.corrupt), num);
    }
    let tag = match phase {
        Phase::Train => "sn-train",
        Phase::Eval => "sn-eval",
    };
    Ok(tally.report(tag, cfg.tolerance))
}

/// Synchronized SN check over `cfg.partitions` parts, each of `cfg.dims`.
pub fn check_sn_sync(cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = Rng::new(cfg.seed ^ 0x5c);
    let d = cfg.dims;
    let parts: Vec<Tensor4> = (0..cfg.partitions)
        .map(|_| Tensor4::fill_normal(d, &mut rng, 0.2, 1.3))
        .collect::<Result<_>>()?;
    let rs: Vec<Tensor4> = (0..cfg.partitions)
        .map(|_| Tensor4::fill_normal(d, &mut rng, 0.0, 1.0))
        .collect::<Result<_>>()?;
    let params = random_sn_params(d.c, &mut rng)?;

    let loss = |p: &SnParams, parts: &[Tensor4]| -> Result<f64> {
        let (ys, _) = sn_forward_sync(&PartitionedBatch::new(parts.to_vec())?, p, Phase::Train)?;
        let mut total = 0.0;
        for (y, r) in ys.iter().zip(&rs) {
            total += y.dot(r)?;
        }
        Ok(total)
    };
    let (_, cache) = sn_forward_sync(&PartitionedBatch::new(parts.clone())?, &params, Phase::Train)?;
    let g = sn_backward_sync(&cache, &rs)?;

    let mut tally = Tally::default();
    for p in 0..parts.len() {
        for k in coordinates(d.len(), cfg.input_samples, &mut rng) {
            let num = central(
                |v| {
                    let mut pp = parts.clone();
                    pp[p].data_mut()[k] = v;
                    loss(&params, &pp)
                },
                parts[p].data()[k],
                cfg.step,
            )?;
            tally.add(corrupt(g.dx[p].data()[k], cfg.corrupt), num);
        }
    }
    for s in sn_slots(d.c) {
        let mut p = params.clone();
        let base = *slot_mut(&mut p, s);
        let num = central(
            |v| {
                *slot_mut(&mut p, s) = v;
                loss(&p, &parts)
            },
            base,
            cfg.step,
        )?;
        let a = slot_grad(s, &g.dgamma, &g.dbeta, &g.dlambda_mu, &g.dlambda_sigma);
        tally.add(corrupt(a, cfg.corrupt), num);
    }
    Ok(tally.report(format!("sn-sync-p{}", cfg.partitions), cfg.tolerance))
}

/// Every baseline mode, SN in both phases and synchronized SN.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for mode in [NormMode::In, NormMode::Ln, NormMode::Bn] {
        out.push(check_baseline(mode, Phase::Train, cfg)?);
    }
    // GN needs a channel count with a nontrivial split.
    let gn_cfg = GradCheckConfig {
        dims: Dims::new(cfg.dims.n, 4, cfg.dims.h, cfg.dims.w),
        ..cfg.clone()
    };
    out.push(check_baseline(NormMode::Gn(2), Phase::Train, &gn_cfg)?);
    out.push(check_baseline(NormMode::Bn, Phase::Eval, cfg)?);
    out.push(check_sn(Phase::Train, cfg)?);
    out.push(check_sn(Phase::Eval, cfg)?);
    out.push(check_sn_sync(cfg)?);
    Ok(out)
}
