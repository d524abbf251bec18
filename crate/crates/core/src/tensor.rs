//! Dense NCHW tensors of `f64` and the deterministic generator used to fill them.

use std::io::{Read, Write};
use std::ops::BitOr;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SnError};

const DUMP_MAGIC: &[u8; 4] = b"SNT4";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one (n, c) plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(SnError::Dimension(format!(
                "all dims must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Set of tensor axes, used to select reduction directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Axes(u8);

impl Axes {
    pub const N: Axes = Axes(1);
    pub const C: Axes = Axes(2);
    pub const H: Axes = Axes(4);
    pub const W: Axes = Axes(8);
    pub const NONE: Axes = Axes(0);
    pub const ALL: Axes = Axes(15);

    pub fn contains(self, other: Axes) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl BitOr for Axes {
    type Output = Axes;
    fn bitor(self, rhs: Axes) -> Axes {
        Axes(self.0 | rhs.0)
    }
}

/// Result of reducing a tensor along some axes. Reduced axes keep extent 1,
/// so `shape` always has four entries and `data` is laid out NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct StatView {
    pub reduced: Axes,
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl StatView {
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        let [_, sc, sh, sw] = self.shape;
        self.data[((n * sc + c) * sh + i) * sw + j]
    }
}

/// Dense 4D array in N-major NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f64) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            data: vec![value; dims.len()],
        })
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(SnError::Dimension(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    /// i.i.d. normal entries drawn from `rng` in layout order.
    pub fn fill_normal(dims: Dims, rng: &mut Rng, mean: f64, std: f64) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(SnError::Argument(format!(
                "fill_normal needs finite mean and std >= 0, got mean={mean} std={std}"
            )));
        }
        dims.validate()?;
        let data = (0..dims.len()).map(|_| rng.normal(mean, std)).collect();
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        debug_assert!(n < self.dims.n && c < self.dims.c && i < self.dims.h && j < self.dims.w);
        ((n * self.dims.c + c) * self.dims.h + i) * self.dims.w + j
    }

    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.offset(n, c, i, j)]
    }

    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: f64) {
        let k = self.offset(n, c, i, j);
        self.data[k] = v;
    }

    /// Contiguous H×W slice for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// One sample as its own tensor with N = 1.
    pub fn sample(&self, n: usize) -> Tensor4 {
        let per = self.dims.c * self.dims.plane();
        Tensor4 {
            dims: Dims::new(1, self.dims.c, self.dims.h, self.dims.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        self.check_same_dims(other)?;
        Ok(Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_scalar(&self, a: f64) -> Tensor4 {
        self.map(|v| v + a)
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.check_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_dims(&self, other: &Tensor4) -> Result<()> {
        if self.dims != other.dims {
            return Err(SnError::Contract(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Arithmetic mean over `axes`. Reduced axes are kept with extent 1.
    /// Summation runs in layout order, so the result does not depend on scheduling.
    pub fn reduce_mean(&self, axes: Axes) -> Result<StatView> {
        if axes.is_empty() {
            return Err(SnError::Argument("reduce_mean needs a nonempty axis set".into()));
        }
        let d = self.dims;
        let keep = |ax: Axes, extent: usize| if axes.contains(ax) { 1 } else { extent };
        let shape = [keep(Axes::N, d.n), keep(Axes::C, d.c), keep(Axes::H, d.h), keep(Axes::W, d.w)];
        let mut sums = vec![0.0; shape.iter().product()];
        let mut k = 0;
        for n in 0..d.n {
            let on = if shape[0] == 1 { 0 } else { n };
            for c in 0..d.c {
                let oc = if shape[1] == 1 { 0 } else { c };
                for i in 0..d.h {
                    let oi = if shape[2] == 1 { 0 } else { i };
                    for j in 0..d.w {
                        let oj = if shape[3] == 1 { 0 } else { j };
                        sums[((on * shape[1] + oc) * shape[2] + oi) * shape[3] + oj] += self.data[k];
                        k += 1;
                    }
                }
            }
        }
        let count = (self.data.len() / sums.len()) as f64;
        for s in &mut sums {
            *s /= count;
        }
        Ok(StatView {
            reduced: axes,
            shape,
            data: sums,
        })
    }

    /// Stack tensors along N. All parts must share C, H, W.
    pub fn concat_batch(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| SnError::Argument("concat_batch needs at least one part".into()))?;
        let (c, h, w) = (first.dims.c, first.dims.h, first.dims.w);
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if (p.dims.c, p.dims.h, p.dims.w) != (c, h, w) {
                return Err(SnError::Contract(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.dims, p.dims
                )));
            }
            n += p.dims.n;
            data.extend_from_slice(&p.data);
        }
        Tensor4::from_vec(Dims::new(n, c, h, w), data)
    }

    /// Split along N into chunks of the given sample counts.
    pub fn split_batch(&self, sizes: &[usize]) -> Result<Vec<Tensor4>> {
        if sizes.iter().sum::<usize>() != self.dims.n {
            return Err(SnError::Contract(format!(
                "split sizes {sizes:?} do not add up to N={}",
                self.dims.n
            )));
        }
        let per = self.dims.c * self.dims.plane();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(Tensor4::from_vec(
                Dims::new(s, self.dims.c, self.dims.h, self.dims.w),
                self.data[start * per..(start + s) * per].to_vec(),
            )?);
            start += s;
        }
        Ok(out)
    }

    /// Writes the `SNT4` dump: magic, four little-endian u32 dims, then raw
    /// little-endian f64 values in layout order.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(DUMP_MAGIC)?;
        for d in [self.dims.n, self.dims.c, self.dims.h, self.dims.w] {
            let d = u32::try_from(d)
                .map_err(|_| SnError::Dimension(format!("dim {d} does not fit in u32")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Tensor4> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(SnError::Argument("not an SNT4 tensor dump".into()));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        dims.validate()?;
        let mut data = Vec::with_capacity(dims.len());
        let mut b = [0u8; 8];
        for _ in 0..dims.len() {
            input.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        Tensor4::from_vec(dims, data)
    }
}

/// Seeded generator backed by ChaCha8, a counter-based stream cipher whose
/// output is fixed by the seed on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named sub-stream of the same seed.
    pub fn substream(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, bound: usize) -> usize {
        self.inner.random_range(0..bound)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
