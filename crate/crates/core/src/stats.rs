//! Means and variances for the IN, LN, BN and GN normalizers.
//!
//! Two routes are provided. [`direct_stats`] sums over each normalizer's
//! index set with a two-pass variance. The reuse route computes IN moments
//! once ([`in_stats`]) and derives LN and BN moments from them through
//! `E[var + mu^2] - mu^2`; any negative variance that cancellation leaves
//! behind is clamped to exactly zero and counted in
//! [`StatPair::clamp_events`].
//!
//! All variances are biased (divided by the element count).

use serde::{Deserialize, Serialize};

use crate::error::{Result, SnError};
use crate::tensor::Tensor4;

/// Which entries a statistics array is indexed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Signature {
    /// One entry per (sample, channel): IN.
    PerNC { n: usize, c: usize },
    /// One entry per sample: LN.
    PerN { n: usize },
    /// One entry per channel: BN.
    PerC { c: usize },
    /// One entry per (sample, group): GN.
    PerNG { n: usize, g: usize },
}

impl Signature {
    pub fn len(&self) -> usize {
        match *self {
            Signature::PerNC { n, c } => n * c,
            Signature::PerN { n } => n,
            Signature::PerC { c } => c,
            Signature::PerNG { n, g } => n * g,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatPair {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub signature: Signature,
    /// Variances that came out negative on the reuse path and were set to 0.
    pub clamp_events: usize,
}

impl StatPair {
    fn new(mu: Vec<f64>, var: Vec<f64>, signature: Signature) -> Self {
        debug_assert_eq!(mu.len(), signature.len());
        debug_assert_eq!(var.len(), signature.len());
        Self {
            mu,
            var,
            signature,
            clamp_events: 0,
        }
    }

    /// Number of scalars held (means plus variances).
    pub fn count(&self) -> usize {
        self.mu.len() + self.var.len()
    }

    /// Mean for sample `n`, channel `c`, broadcasting over reduced axes.
    /// Not defined for group signatures.
    #[inline]
    pub fn mu_at(&self, n: usize, c: usize) -> f64 {
        self.mu[self.slot(n, c)]
    }

    #[inline]
    pub fn var_at(&self, n: usize, c: usize) -> f64 {
        self.var[self.slot(n, c)]
    }

    #[inline]
    fn slot(&self, n: usize, c: usize) -> usize {
        match self.signature {
            Signature::PerNC { c: cc, .. } => n * cc + c,
            Signature::PerN { .. } => n,
            Signature::PerC { .. } => c,
            Signature::PerNG { .. } => panic!("per-(n,c) lookup on group statistics"),
        }
    }
}

/// Normalizers with an index set definable on a single tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatMode {
    In,
    Ln,
    Bn,
}

/// A batch split into simulated devices. Parts share C, H and W.
#[derive(Debug, Clone)]
pub struct PartitionedBatch {
    parts: Vec<Tensor4>,
}

impl PartitionedBatch {
    pub fn new(parts: Vec<Tensor4>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| SnError::Argument("a partitioned batch needs at least one part".into()))?;
        let d0 = first.dims();
        for p in &parts[1..] {
            let d = p.dims();
            if (d.c, d.h, d.w) != (d0.c, d0.h, d0.w) {
                return Err(SnError::Contract(format!(
                    "partition shape {d:?} does not match {d0:?}"
                )));
            }
        }
        Ok(Self { parts })
    }

    /// Splits `x` into `count` parts of equal size.
    pub fn split_even(x: &Tensor4, count: usize) -> Result<Self> {
        let n = x.dims().n;
        if count == 0 || !n.is_multiple_of(count) {
            return Err(SnError::Argument(format!(
                "cannot split N={n} into {count} equal partitions"
            )));
        }
        Self::new(x.split_batch(&vec![n / count; count])?)
    }

    pub fn parts(&self) -> &[Tensor4] {
        &self.parts
    }

    pub fn into_parts(self) -> Vec<Tensor4> {
        self.parts
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn total_samples(&self) -> usize {
        self.parts.iter().map(|p| p.dims().n).sum()
    }

    pub fn concat(&self) -> Result<Tensor4> {
        Tensor4::concat_batch(&self.parts)
    }
}

fn plane_moments(plane: &[f64]) -> (f64, f64) {
    let len = plane.len() as f64;
    let mu = plane.iter().sum::<f64>() / len;
    let var = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / len;
    (mu, var)
}

/// Per-(n, c) mean and variance over H×W.
pub fn in_stats(x: &Tensor4) -> StatPair {
    let d = x.dims();
    let mut mu = Vec::with_capacity(d.n * d.c);
    let mut var = Vec::with_capacity(d.n * d.c);
    for n in 0..d.n {
        for c in 0..d.c {
            let (m, v) = plane_moments(x.plane(n, c));
            mu.push(m);
            var.push(v);
        }
    }
    StatPair::new(mu, var, Signature::PerNC { n: d.n, c: d.c })
}

fn expect_in(stats: &StatPair) -> Result<(usize, usize)> {
    match stats.signature {
        Signature::PerNC { n, c } => Ok((n, c)),
        other => Err(SnError::Contract(format!(
            "expected per-(n,c) IN statistics, got {other:?}"
        ))),
    }
}

fn clamp(v: f64, events: &mut usize) -> f64 {
    if v < 0.0 {
        *events += 1;
        0.0
    } else {
        v
    }
}

/// Per-sample statistics derived only from IN statistics.
pub fn ln_stats_from_in(stats: &StatPair) -> Result<StatPair> {
    let (n, c) = expect_in(stats)?;
    let mut events = 0;
    let mut mu = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    for s in 0..n {
        let row = s * c..(s + 1) * c;
        let m = stats.mu[row.clone()].iter().sum::<f64>() / c as f64;
        let second = stats.var[row.clone()]
            .iter()
            .zip(&stats.mu[row])
            .map(|(v, m)| v + m * m)
            .sum::<f64>()
            / c as f64;
        mu.push(m);
        var.push(clamp(second - m * m, &mut events));
    }
    let mut out = StatPair::new(mu, var, Signature::PerN { n });
    out.clamp_events = events;
    Ok(out)
}

/// Per-channel running sums used to pool BN moments across samples and
/// partitions: (sample count, Σ mu_in, Σ (var_in + mu_in^2)).
#[derive(Debug, Clone)]
pub(crate) struct ChannelMoments {
    samples: usize,
    sum_mu: Vec<f64>,
    sum_second: Vec<f64>,
}

impl ChannelMoments {
    pub(crate) fn new(c: usize) -> Self {
        Self {
            samples: 0,
            sum_mu: vec![0.0; c],
            sum_second: vec![0.0; c],
        }
    }

    pub(crate) fn absorb(&mut self, stats: &StatPair) -> Result<()> {
        let (n, c) = expect_in(stats)?;
        if c != self.sum_mu.len() {
            return Err(SnError::Contract(format!(
                "channel count {c} does not match accumulator width {}",
                self.sum_mu.len()
            )));
        }
        for s in 0..n {
            for ch in 0..c {
                let m = stats.mu[s * c + ch];
                self.sum_mu[ch] += m;
                self.sum_second[ch] += stats.var[s * c + ch] + m * m;
            }
        }
        self.samples += n;
        Ok(())
    }

    pub(crate) fn finish(&self) -> StatPair {
        let count = self.samples as f64;
        let c = self.sum_mu.len();
        let mut events = 0;
        let mut mu = Vec::with_capacity(c);
        let mut var = Vec::with_capacity(c);
        for ch in 0..c {
            let m = self.sum_mu[ch] / count;
            mu.push(m);
            var.push(clamp(self.sum_second[ch] / count - m * m, &mut events));
        }
        let mut out = StatPair::new(mu, var, Signature::PerC { c });
        out.clamp_events = events;
        out
    }
}

/// Per-channel statistics derived only from IN statistics.
pub fn bn_stats_from_in(stats: &StatPair) -> Result<StatPair> {
    let (_, c) = expect_in(stats)?;
    let mut acc = ChannelMoments::new(c);
    acc.absorb(stats)?;
    Ok(acc.finish())
}

/// Literal two-pass statistics over the index set of `mode`.
pub fn direct_stats(x: &Tensor4, mode: StatMode) -> StatPair {
    let d = x.dims();
    let hw = d.plane();
    match mode {
        StatMode::In => in_stats(x),
        StatMode::Ln => {
            let per = d.c * hw;
            let (mu, var) = x.data().chunks(per).map(plane_moments).unzip();
            StatPair::new(mu, var, Signature::PerN { n: d.n })
        }
        StatMode::Bn => {
            let count = (d.n * hw) as f64;
            let mut mu = vec![0.0; d.c];
            let mut var = vec![0.0; d.c];
            for c in 0..d.c {
                let s: f64 = (0..d.n).map(|n| x.plane(n, c).iter().sum::<f64>()).sum();
                mu[c] = s / count;
                var[c] = (0..d.n)
                    .map(|n| x.plane(n, c).iter().map(|v| (v - mu[c]).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / count;
            }
            StatPair::new(mu, var, Signature::PerC { c: d.c })
        }
    }
}

/// Per-(n, group) statistics over C/g channels and H×W, two-pass.
pub fn gn_stats(x: &Tensor4, groups: usize) -> Result<StatPair> {
    let d = x.dims();
    if groups == 0 || !d.c.is_multiple_of(groups) {
        return Err(SnError::Argument(format!(
            "channel count {} is not divisible by {groups} groups",
            d.c
        )));
    }
    let per = d.c / groups * d.plane();
    let (mu, var) = x.data().chunks(per).map(plane_moments).unzip();
    Ok(StatPair::new(mu, var, Signature::PerNG { n: d.n, g: groups }))
}

/// BN statistics pooled over every partition, reduced in partition order.
pub fn sync_bn_stats(batch: &PartitionedBatch) -> Result<StatPair> {
    let c = batch.parts()[0].dims().c;
    let mut acc = ChannelMoments::new(c);
    for part in batch.parts() {
        acc.absorb(&in_stats(part))?;
    }
    Ok(acc.finish())
}
