//! Small convolutional classifier: `K × (conv3x3 → norm → relu)`, global
//! average pooling, then a linear head.
//!
//! Every pass works on a list of partitions. With `sync` set, BN statistics
//! (alone or inside SN) are pooled over all partitions; otherwise every
//! partition normalizes with its own batch.

use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_backward, BaselineCache, BaselineLayer, BaselineParams, NormMode, Phase};
use crate::error::{Result, SnError};
use crate::snlayer::{sn_backward_sync, HardSelection, ImportanceWeights, SnCache, SnLayer};
use crate::stats::StatPair;
use crate::tensor::{Dims, Rng, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    In,
    Ln,
    Bn,
    Gn(usize),
    Sn,
}

impl NormKind {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "in" => NormKind::In,
            "ln" => NormKind::Ln,
            "bn" => NormKind::Bn,
            "sn" => NormKind::Sn,
            "gn" => NormKind::Gn(crate::baseline::DEFAULT_GN_GROUPS),
            _ => match s.strip_prefix("gn") {
                Some(g) => NormKind::Gn(
                    g.parse()
                        .map_err(|_| SnError::Argument(format!("bad group count in {s:?}")))?,
                ),
                None => return Err(SnError::Argument(format!("unknown normalizer {s:?}"))),
            },
        })
    }

    pub fn name(&self) -> String {
        match self {
            NormKind::In => "in".into(),
            NormKind::Ln => "ln".into(),
            NormKind::Bn => "bn".into(),
            NormKind::Gn(g) => format!("gn{g}"),
            NormKind::Sn => "sn".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub classes: usize,
    pub norm: NormKind,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            width: 16,
            blocks: 4,
            classes: 4,
            norm: NormKind::Sn,
            eps: crate::baseline::DEFAULT_EPS,
            momentum: crate::baseline::DEFAULT_MOMENTUM,
        }
    }
}

/// 3×3 convolution, stride 1, zero padding 1, no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    /// Layout [cout][cin][3][3].
    pub weight: Vec<f64>,
}

impl Conv3x3 {
    /// He-normal initialization.
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        Self {
            cin,
            cout,
            weight: (0..cout * cin * 9).map(|_| rng.normal(0.0, std)).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let d = x.dims();
        if d.c != self.cin {
            return Err(SnError::Contract(format!("conv expects {} channels, got {}", self.cin, d.c)));
        }
        let (h, w) = (d.h, d.w);
        let mut y = Tensor4::zeros(Dims::new(d.n, self.cout, h, w))?;
        for n in 0..d.n {
            for co in 0..self.cout {
                let out = y.plane_mut(n, co);
                for ci in 0..self.cin {
                    let src = x.plane(n, ci);
                    let k = &self.weight[(co * self.cin + ci) * 9..][..9];
                    for (t, &wt) in k.iter().enumerate() {
                        let (di, dj) = (t / 3, t % 3);
                        for i in 0..h {
                            let si = i + di;
                            if si < 1 || si > h {
                                continue;
                            }
                            let srow = &src[(si - 1) * w..si * w];
                            let orow = &mut out[i * w..(i + 1) * w];
                            let (j0, j1) = (usize::from(dj == 0), if dj == 2 { w - 1 } else { w });
                            for j in j0..j1 {
                                orow[j] += wt * srow[j + dj - 1];
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Returns (dx, dweight).
    pub fn backward(&self, x: &Tensor4, dy: &Tensor4) -> Result<(Tensor4, Vec<f64>)> {
        let d = x.dims();
        let (h, w) = (d.h, d.w);
        let mut dx = Tensor4::zeros(d)?;
        let mut dw = vec![0.0; self.weight.len()];
        for n in 0..d.n {
            for co in 0..self.cout {
                let g = dy.plane(n, co);
                for ci in 0..self.cin {
                    let base = (co * self.cin + ci) * 9;
                    let src = x.plane(n, ci);
                    for t in 0..9 {
                        let (di, dj) = (t / 3, t % 3);
                        let wt = self.weight[base + t];
                        let mut acc = 0.0;
                        let dxp = dx.plane_mut(n, ci);
                        for i in 0..h {
                            let si = i + di;
                            if si < 1 || si > h {
                                continue;
                            }
                            let (j0, j1) = (usize::from(dj == 0), if dj == 2 { w - 1 } else { w });
                            for j in j0..j1 {
                                let s = (si - 1) * w + j + dj - 1;
                                let gv = g[i * w + j];
                                acc += gv * src[s];
                                dxp[s] += wt * gv;
                            }
                        }
                        dw[base + t] += acc;
                    }
                }
            }
        }
        Ok((dx, dw))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NormLayer {
    Baseline(BaselineParams),
    Switchable(SnLayer),
}

impl NormLayer {
    fn new(kind: NormKind, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        let mode = match kind {
            NormKind::In => NormMode::In,
            NormKind::Ln => NormMode::Ln,
            NormKind::Bn => NormMode::Bn,
            NormKind::Gn(g) => NormMode::Gn(g),
            NormKind::Sn => {
                let mut l = SnLayer::new(channels)?;
                l.params.eps = eps;
                l.momentum = momentum;
                return Ok(NormLayer::Switchable(l));
            }
        };
        Ok(NormLayer::Baseline(BaselineParams::with_options(mode, channels, eps, momentum)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub spec: ModelSpec,
    pub convs: Vec<Conv3x3>,
    pub norms: Vec<NormLayer>,
    /// Layout [classes][width].
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

/// Parameter role, used by the optimizer to decide on weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Affine,
    Control,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    /// Same order as [`ToyModel::params_mut`].
    pub slices: Vec<Vec<f64>>,
}

enum NormCache {
    PerPart(Vec<BaselineCache>),
    Pooled(BaselineCache, Vec<usize>),
    SnPerPart(Vec<SnCache>),
    SnSync(SnCache),
}

struct BlockTape {
    input: Vec<Tensor4>,
    norm: NormCache,
    /// Post-norm, pre-activation values.
    normed: Vec<Tensor4>,
}

pub struct Tape {
    blocks: Vec<BlockTape>,
    pooled: Vec<Vec<f64>>,
    spatial: usize,
}

pub struct ForwardOut {
    /// Logits per partition, row-major [n][classes].
    pub logits: Vec<Vec<f64>>,
    pub tape: Tape,
    /// Minibatch BN statistics seen by each SN layer (pooled over partitions
    /// in sync mode, from the first partition otherwise).
    pub sn_bn_stats: Vec<StatPair>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassMode {
    pub phase: Phase,
    pub sync: bool,
}

impl ToyModel {
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        if spec.blocks == 0 || spec.width == 0 || spec.in_channels == 0 || spec.classes < 2 {
            return Err(SnError::Argument(format!("invalid model spec {spec:?}")));
        }
        let mut convs = Vec::with_capacity(spec.blocks);
        let mut norms = Vec::with_capacity(spec.blocks);
        for b in 0..spec.blocks {
            let cin = if b == 0 { spec.in_channels } else { spec.width };
            convs.push(Conv3x3::new(cin, spec.width, rng));
            norms.push(NormLayer::new(spec.norm, spec.width, spec.eps, spec.momentum)?);
        }
        let std = (1.0 / spec.width as f64).sqrt();
        let head_weight = (0..spec.classes * spec.width).map(|_| rng.normal(0.0, std)).collect();
        Ok(Self {
            head_bias: vec![0.0; spec.classes],
            spec,
            convs,
            norms,
            head_weight,
        })
    }

    pub fn sn_layers(&self) -> impl Iterator<Item = &SnLayer> {
        self.norms.iter().filter_map(|n| match n {
            NormLayer::Switchable(l) => Some(l),
            _ => None,
        })
    }

    pub fn sn_layers_mut(&mut self) -> impl Iterator<Item = &mut SnLayer> {
        self.norms.iter_mut().filter_map(|n| match n {
            NormLayer::Switchable(l) => Some(l),
            _ => None,
        })
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.norms.len()).map(|i| format!("block{i}.norm")).collect()
    }

    pub fn sn_ratios(&self) -> Result<Vec<ImportanceWeights>> {
        self.sn_layers().map(|l| l.params.effective_weights()).collect()
    }

    pub fn hard_selections(&self) -> Vec<Option<HardSelection>> {
        self.sn_layers().map(|l| l.params.hard).collect()
    }

    /// Every learnable array with its role, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<(ParamRole, &mut [f64])> {
        let mut out: Vec<(ParamRole, &mut [f64])> = Vec::new();
        for (conv, norm) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.push((ParamRole::Weight, conv.weight.as_mut_slice()));
            match norm {
                NormLayer::Baseline(p) => {
                    out.push((ParamRole::Affine, p.gamma.as_mut_slice()));
                    out.push((ParamRole::Affine, p.beta.as_mut_slice()));
                }
                NormLayer::Switchable(l) => {
                    let p = &mut l.params;
                    out.push((ParamRole::Affine, p.gamma.as_mut_slice()));
                    out.push((ParamRole::Affine, p.beta.as_mut_slice()));
                    out.push((ParamRole::Control, p.lambda_mu.as_mut_slice()));
                    out.push((ParamRole::Control, p.lambda_sigma.as_mut_slice()));
                }
            }
        }
        out.push((ParamRole::Weight, self.head_weight.as_mut_slice()));
        out.push((ParamRole::Affine, self.head_bias.as_mut_slice()));
        out
    }

    /// Hash of the bit patterns of every learnable scalar, for change detection.
    pub fn checksum(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut m = self.clone();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (_, v) in m.params_mut() {
            for x in v.iter() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Pure forward pass; moving statistics are not touched.
    pub fn forward(&self, parts: &[Tensor4], mode: PassMode) -> Result<ForwardOut> {
        if parts.is_empty() {
            return Err(SnError::Argument("forward needs at least one partition".into()));
        }
        let mut acts: Vec<Tensor4> = parts.to_vec();
        let mut blocks = Vec::with_capacity(self.convs.len());
        let mut sn_bn_stats = Vec::new();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let conv_out: Vec<Tensor4> = acts.iter().map(|a| conv.forward(a)).collect::<Result<_>>()?;
            let (normed, cache) = match norm {
                NormLayer::Baseline(p) => {
                    let layer = BaselineLayer::from_params(p.clone());
                    if mode.sync && conv_out.len() > 1 {
                        let sizes: Vec<usize> = conv_out.iter().map(|t| t.dims().n).collect();
                        let cat = Tensor4::concat_batch(&conv_out)?;
                        let (y, c) = layer.forward_frozen(&cat, mode.phase)?;
                        (y.split_batch(&sizes)?, NormCache::Pooled(c, sizes))
                    } else {
                        let mut ys = Vec::with_capacity(conv_out.len());
                        let mut cs = Vec::with_capacity(conv_out.len());
                        for t in &conv_out {
                            let (y, c) = layer.forward_frozen(t, mode.phase)?;
                            ys.push(y);
                            cs.push(c);
                        }
                        (ys, NormCache::PerPart(cs))
                    }
                }
                NormLayer::Switchable(l) => {
                    if mode.sync {
                        let (ys, c) = l.forward_frozen(conv_out.clone(), mode.phase)?;
                        sn_bn_stats.push(c.bn_stats().clone());
                        (ys, NormCache::SnSync(c))
                    } else {
                        let mut ys = Vec::with_capacity(conv_out.len());
                        let mut cs = Vec::with_capacity(conv_out.len());
                        for t in &conv_out {
                            let (mut y, c) = l.forward_frozen(vec![t.clone()], mode.phase)?;
                            ys.push(y.pop().expect("one partition"));
                            cs.push(c);
                        }
                        sn_bn_stats.push(cs[0].bn_stats().clone());
                        (ys, NormCache::SnPerPart(cs))
                    }
                }
            };
            let input = std::mem::replace(&mut acts, normed.iter().map(|t| t.map(|v| v.max(0.0))).collect());
            blocks.push(BlockTape {
                input,
                norm: cache,
                normed,
            });
        }

        let width = self.spec.width;
        let classes = self.spec.classes;
        let mut pooled = Vec::with_capacity(acts.len());
        let mut logits = Vec::with_capacity(acts.len());
        let spatial = acts[0].dims().plane();
        for a in &acts {
            let d = a.dims();
            let mut feats = vec![0.0; d.n * width];
            for n in 0..d.n {
                for c in 0..width {
                    feats[n * width + c] = a.plane(n, c).iter().sum::<f64>() / spatial as f64;
                }
            }
            let mut out = vec![0.0; d.n * classes];
            for n in 0..d.n {
                for k in 0..classes {
                    let row = &self.head_weight[k * width..(k + 1) * width];
                    out[n * classes + k] =
                        self.head_bias[k] + row.iter().zip(&feats[n * width..(n + 1) * width]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            pooled.push(feats);
            logits.push(out);
        }
        Ok(ForwardOut {
            logits,
            tape: Tape {
                blocks,
                pooled,
                spatial,
            },
            sn_bn_stats,
        })
    }

    /// Folds the minibatch statistics of a training forward into the moving
    /// averages of BN and SN layers.
    pub fn track_moving(&mut self, tape: &Tape) {
        for (norm, block) in self.norms.iter_mut().zip(&tape.blocks) {
            match (norm, &block.norm) {
                (NormLayer::Baseline(p), NormCache::PerPart(cs)) => {
                    for c in cs {
                        if let Some((mu, var)) = c.batch_stats() {
                            p.update_moving(mu, var);
                        }
                    }
                }
                (NormLayer::Baseline(p), NormCache::Pooled(c, _)) => {
                    if let Some((mu, var)) = c.batch_stats() {
                        p.update_moving(mu, var);
                    }
                }
                (NormLayer::Switchable(l), NormCache::SnSync(c)) => {
                    if c.phase() == Phase::Train {
                        l.track(c.bn_stats());
                    }
                }
                (NormLayer::Switchable(l), NormCache::SnPerPart(cs)) => {
                    for c in cs {
                        if c.phase() == Phase::Train {
                            l.track(c.bn_stats());
                        }
                    }
                }
                _ => {}
            }
        }
    }

    /// Backpropagates logit gradients through the whole network.
    pub fn backward(&self, tape: &Tape, dlogits: &[Vec<f64>]) -> Result<ModelGrads> {
        let width = self.spec.width;
        let classes = self.spec.classes;
        if dlogits.len() != tape.pooled.len() {
            return Err(SnError::Contract("one logit gradient per partition is required".into()));
        }
        let mut dhead_w = vec![0.0; self.head_weight.len()];
        let mut dhead_b = vec![0.0; classes];
        let last = tape.blocks.last().expect("at least one block");
        let mut grads: Vec<Tensor4> = Vec::with_capacity(dlogits.len());
        for (p, dl) in dlogits.iter().enumerate() {
            let feats = &tape.pooled[p];
            let normed = &last.normed[p];
            let d = normed.dims();
            let mut dfeat = vec![0.0; d.n * width];
            for n in 0..d.n {
                for k in 0..classes {
                    let g = dl[n * classes + k];
                    dhead_b[k] += g;
                    for c in 0..width {
                        dhead_w[k * width + c] += g * feats[n * width + c];
                        dfeat[n * width + c] += g * self.head_weight[k * width + c];
                    }
                }
            }
            let mut da = Tensor4::zeros(d)?;
            let inv = 1.0 / tape.spatial as f64;
            for n in 0..d.n {
                for c in 0..width {
                    let g = dfeat[n * width + c] * inv;
                    for (o, &z) in da.plane_mut(n, c).iter_mut().zip(normed.plane(n, c)) {
                        *o = if z > 0.0 { g } else { 0.0 };
                    }
                }
            }
            grads.push(da);
        }

        let mut block_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.convs.len()];
        for b in (0..self.convs.len()).rev() {
            let block = &tape.blocks[b];
            // `grads` holds dL/d(normed) for this block.
            let (dconv_out, norm_slices): (Vec<Tensor4>, Vec<Vec<f64>>) = match &block.norm {
                NormCache::PerPart(cs) => {
                    let mut dx = Vec::with_capacity(cs.len());
                    let c = width;
                    let (mut dg, mut db) = (vec![0.0; c], vec![0.0; c]);
                    for (cache, g) in cs.iter().zip(&grads) {
                        let gb = baseline_backward(cache, g)?;
                        add(&mut dg, &gb.dgamma);
                        add(&mut db, &gb.dbeta);
                        dx.push(gb.dx);
                    }
                    (dx, vec![dg, db])
                }
                NormCache::Pooled(cache, sizes) => {
                    let gb = baseline_backward(cache, &Tensor4::concat_batch(&grads)?)?;
                    (gb.dx.split_batch(sizes)?, vec![gb.dgamma, gb.dbeta])
                }
                NormCache::SnSync(cache) => {
                    let g = sn_backward_sync(cache, &grads)?;
                    (
                        g.dx,
                        vec![g.dgamma, g.dbeta, g.dlambda_mu.to_vec(), g.dlambda_sigma.to_vec()],
                    )
                }
                NormCache::SnPerPart(cs) => {
                    let c = width;
                    let (mut dg, mut db) = (vec![0.0; c], vec![0.0; c]);
                    let (mut dlm, mut dls) = (vec![0.0; 3], vec![0.0; 3]);
                    let mut dx = Vec::with_capacity(cs.len());
                    for (cache, g) in cs.iter().zip(&grads) {
                        let mut gs = sn_backward_sync(cache, std::slice::from_ref(g))?;
                        add(&mut dg, &gs.dgamma);
                        add(&mut db, &gs.dbeta);
                        add(&mut dlm, &gs.dlambda_mu);
                        add(&mut dls, &gs.dlambda_sigma);
                        dx.push(gs.dx.pop().expect("one partition"));
                    }
                    (dx, vec![dg, db, dlm, dls])
                }
            };
            let conv = &self.convs[b];
            let mut dw = vec![0.0; conv.weight.len()];
            let mut dinput = Vec::with_capacity(dconv_out.len());
            for (x, g) in block.input.iter().zip(&dconv_out) {
                let (dx, w) = conv.backward(x, g)?;
                add(&mut dw, &w);
                dinput.push(dx);
            }
            let mut slices = vec![dw];
            slices.extend(norm_slices);
            block_grads[b] = slices;
            if b > 0 {
                let prev = &tape.blocks[b - 1].normed;
                grads = dinput
                    .into_iter()
                    .zip(prev)
                    .map(|(g, z)| g.zip_map(z, |g, z| if z > 0.0 { g } else { 0.0 }))
                    .collect::<Result<_>>()?;
            }
        }
        let mut slices: Vec<Vec<f64>> = block_grads.into_iter().flatten().collect();
        slices.push(dhead_w);
        slices.push(dhead_b);
        Ok(ModelGrads { slices })
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Mean softmax cross-entropy over every sample of every partition, the
/// number of correct argmax predictions, and dL/dlogits.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[Vec<usize>], classes: usize) -> (f64, usize, Vec<Vec<f64>>) {
    let total: usize = labels.iter().map(|l| l.len()).sum();
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(labels) {
        let mut g = vec![0.0; z.len()];
        for (n, &label) in y.iter().enumerate() {
            let row = &z[n * classes..(n + 1) * classes];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            loss += s.ln() + m - row[label];
            let pred = (0..classes).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            if pred == label {
                correct += 1;
            }
            for k in 0..classes {
                let p = e[k] / s;
                g[n * classes + k] = (p - if k == label { 1.0 } else { 0.0 }) / total as f64;
            }
        }
        grads.push(g);
    }
    (loss / total as f64, correct, grads)
}
