//! Procedural restoration datasets: clean targets from three image families
//! and a degradation operator producing the model input.
//!
//! Family A (band-limited sinusoid textures) is the in-distribution family;
//! B (polygon mosaics) is a moderate shift and C (uniform noise) a severe one.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("invalid degradation: {0}")]
    Degradation(String),
    #[error("index {index} out of range for {count} images")]
    Index { index: usize, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    A,
    B,
    C,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::A, Family::B, Family::C];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::A => "A",
            Family::B => "B",
            Family::C => "C",
        })
    }
}

impl FromStr for Family {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Family::A),
            "B" | "b" => Ok(Family::B),
            "C" | "c" => Ok(Family::C),
            other => Err(DataError::Spec(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DegradationOp {
    GaussNoise { sigma: f64 },
    GaussBlur { radius: usize, sigma: f64 },
    /// Zeroes a `w×h` box at a random position.
    BoxMask { w: usize, h: usize },
    /// 2×2 average pooling followed by nearest-neighbour upsampling.
    Downsample2x,
}

impl fmt::Display for DegradationOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DegradationOp::GaussNoise { sigma } => write!(f, "gauss_noise({sigma})"),
            DegradationOp::GaussBlur { radius, sigma } => write!(f, "gauss_blur({radius},{sigma})"),
            DegradationOp::BoxMask { w, h } => write!(f, "box_mask({w},{h})"),
            DegradationOp::Downsample2x => write!(f, "downsample2x"),
        }
    }
}

impl FromStr for DegradationOp {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || DataError::Degradation(format!("cannot parse `{s}`"));
        let (name, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], &s[i + 1..s.len() - 1]),
            _ => (s, ""),
        };
        let parts: Vec<&str> = args.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        let op = match (name, parts.as_slice()) {
            ("gauss_noise", [sigma]) => DegradationOp::GaussNoise { sigma: sigma.parse().map_err(|_| bad())? },
            ("gauss_blur", [r, sigma]) => DegradationOp::GaussBlur {
                radius: r.parse().map_err(|_| bad())?,
                sigma: sigma.parse().map_err(|_| bad())?,
            },
            ("box_mask", [w, h]) => {
                DegradationOp::BoxMask { w: w.parse().map_err(|_| bad())?, h: h.parse().map_err(|_| bad())? }
            }
            ("downsample2x", []) => DegradationOp::Downsample2x,
            _ => return Err(bad()),
        };
        op.validate(usize::MAX)?;
        Ok(op)
    }
}

impl DegradationOp {
    fn validate(&self, size: usize) -> Result<(), DataError> {
        match *self {
            DegradationOp::GaussNoise { sigma } | DegradationOp::GaussBlur { sigma, .. }
                if !(sigma.is_finite() && sigma >= 0.0) =>
            {
                Err(DataError::Degradation(format!("sigma {sigma} must be finite and non-negative")))
            }
            DegradationOp::BoxMask { w, h } if w > size || h > size => {
                Err(DataError::Degradation(format!("{w}x{h} mask exceeds {size}x{size} image")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Spec(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub family: Family,
    pub size: usize,
    pub count: usize,
    pub degradation: DegradationOp,
    /// (train, val, test) fractions.
    pub splits: (f64, f64, f64),
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(family: Family, count: usize, degradation: DegradationOp, seed: u64) -> Self {
        Self { family, size: 16, count, degradation, splits: (0.7, 0.15, 0.15), seed }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (a, b, c) = self.splits;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(DataError::Spec(format!("split fractions {a},{b},{c} must sum to 1")));
        }
        if self.count < 10 {
            return Err(DataError::Spec(format!("count {} below minimum of 10", self.count)));
        }
        if self.size < 2 {
            return Err(DataError::Spec(format!("image size {} too small", self.size)));
        }
        self.degradation.validate(self.size)
    }

    /// Index lists (train, val, test) partitioning `0..count`.
    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.count).collect();
        idx.shuffle(&mut rng::stream(self.seed, "split"));
        let n_train = (self.count as f64 * self.splits.0).round() as usize;
        let n_val = ((self.count as f64 * self.splits.1).round() as usize).min(self.count - n_train);
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..n_train + n_val].to_vec();
        let mut test = idx[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        (train, val, test)
    }
}

/// Clean target image `1×H×W` in [0,1]; a pure function of (seed, family, index).
pub fn gen_clean(spec: &DatasetSpec, index: usize) -> Result<Tensor, DataError> {
    if index >= spec.count {
        return Err(DataError::Index { index, count: spec.count });
    }
    Ok(gen_family(spec.family, spec.size, spec.seed, index))
}

pub fn gen_family(family: Family, size: usize, seed: u64, index: usize) -> Tensor {
    let mut r = rng::indexed_stream(seed, &format!("clean/{family}"), index as u64);
    let n = size;
    let data = match family {
        Family::A => {
            let comps: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    let amp = r.gen_range(0.5..1.0);
                    let freq = r.gen_range(1.0..=4.0);
                    let theta = r.gen_range(0.0..PI);
                    let phase = r.gen_range(0.0..2.0 * PI);
                    (amp, freq, theta, phase)
                })
                .collect();
            let raw: Vec<f64> = (0..n * n)
                .map(|k| {
                    let (i, j) = ((k / n) as f64, (k % n) as f64);
                    comps
                        .iter()
                        .map(|&(a, f, t, p)| {
                            a * (2.0 * PI * f * (t.cos() * j + t.sin() * i) / n as f64 + p).sin()
                        })
                        .sum()
                })
                .collect();
            let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            raw.iter().map(|v| (v - lo) / span).collect()
        }
        Family::B => {
            let mut img = vec![r.gen_range(0.0..1.0); n * n];
            let n_poly = r.gen_range(4..=8);
            for _ in 0..n_poly {
                let cx = r.gen_range(0.0..n as f64);
                let cy = r.gen_range(0.0..n as f64);
                let radius = r.gen_range(2.0..(n as f64 / 2.0).max(2.5));
                let n_vert = r.gen_range(3..=7);
                let mut angles: Vec<f64> = (0..n_vert).map(|_| r.gen_range(0.0..2.0 * PI)).collect();
                angles.sort_by(f64::total_cmp);
                let verts: Vec<(f64, f64)> =
                    angles.iter().map(|a| (cx + radius * a.cos(), cy + radius * a.sin())).collect();
                let gray = r.gen_range(0.0..1.0);
                for i in 0..n {
                    for j in 0..n {
                        if inside_convex(&verts, j as f64 + 0.5, i as f64 + 0.5) {
                            img[i * n + j] = gray;
                        }
                    }
                }
            }
            img
        }
        Family::C => (0..n * n).map(|_| r.gen_range(0.0..1.0)).collect(),
    };
    let data = data.into_iter().map(|v: f64| v.clamp(0.0, 1.0)).collect();
    Tensor::image(n, n, data).expect("size fixed above")
}

/// Vertices sorted by angle around an interior point form a convex polygon
/// with counter-clockwise winding.
fn inside_convex(verts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = verts.len();
    (0..n).all(|k| {
        let (x0, y0) = verts[k];
        let (x1, y1) = verts[(k + 1) % n];
        (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
    })
}

/// Applies a degradation. `y` must be `1×H×W`; the result has the same shape.
pub fn degrade<R: Rng + ?Sized>(y: &Tensor, op: &DegradationOp, rng: &mut R) -> Result<Tensor, DataError> {
    let (c, h, w) = y.chw().map_err(|e| DataError::Degradation(e.to_string()))?;
    op.validate(h.min(w))?;
    let out = match *op {
        DegradationOp::GaussNoise { sigma } => {
            if sigma == 0.0 {
                y.clone()
            } else {
                let normal = Normal::new(0.0, sigma).expect("sigma validated");
                let noise: Vec<f64> = (0..y.len()).map(|_| normal.sample(rng)).collect();
                let mut out = y.clone();
                // Sensor range: noisy pixels are clipped back into [0,1].
                out.data_mut().iter_mut().zip(noise).for_each(|(v, n)| *v = (*v + n).clamp(0.0, 1.0));
                out
            }
        }
        DegradationOp::GaussBlur { radius, sigma } => gaussian_blur(y, radius, sigma),
        DegradationOp::BoxMask { w: bw, h: bh } => {
            let top = rng.gen_range(0..=h - bh);
            let left = rng.gen_range(0..=w - bw);
            let mut out = y.clone();
            let d = out.data_mut();
            for ch in 0..c {
                for i in top..top + bh {
                    for j in left..left + bw {
                        d[(ch * h + i) * w + j] = 0.0;
                    }
                }
            }
            out
        }
        DegradationOp::Downsample2x => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(DataError::Degradation(format!("downsample2x needs even size, got {h}x{w}")));
            }
            let src = y.data();
            let mut out = vec![0.0; c * h * w];
            for ch in 0..c {
                for bi in 0..h / 2 {
                    for bj in 0..w / 2 {
                        let at = |i: usize, j: usize| (ch * h + i) * w + j;
                        let avg = 0.25
                            * (src[at(2 * bi, 2 * bj)]
                                + src[at(2 * bi + 1, 2 * bj)]
                                + src[at(2 * bi, 2 * bj + 1)]
                                + src[at(2 * bi + 1, 2 * bj + 1)]);
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            out[at(2 * bi + di, 2 * bj + dj)] = avg;
                        }
                    }
                }
            }
            Tensor::new(y.shape().to_vec(), out).expect("same shape")
        }
    };
    Ok(out)
}

/// Separable Gaussian blur with replicate borders and a normalized kernel,
/// so constant images are fixed points.
pub fn gaussian_blur(y: &Tensor, radius: usize, sigma: f64) -> Tensor {
    if radius == 0 || sigma == 0.0 {
        return y.clone();
    }
    let (c, h, w) = y.chw().expect("image tensor");
    let r = radius as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = y.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                tmp[(ch * h + i) * w + j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[(ch * h + i) * w + clamp(j as isize + k as isize - r, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ch * h + i) * w + j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[(ch * h + clamp(i as isize + k as isize - r, h)) * w + j])
                    .sum();
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("same shape")
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub split: Split,
    pub x: Tensor,
    pub y: Tensor,
}

/// A materialized dataset, samples ordered by index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let (train, val, _) = spec.split_indices();
        let samples = (0..spec.count)
            .map(|index| {
                let y = gen_clean(spec, index)?;
                let mut r = rng::indexed_stream(spec.seed, &format!("degrade/{}", spec.family), index as u64);
                let x = degrade(&y, &spec.degradation, &mut r)?;
                let split = if train.binary_search(&index).is_ok() {
                    Split::Train
                } else if val.binary_search(&index).is_ok() {
                    Split::Val
                } else {
                    Split::Test
                };
                Ok(Sample { index, split, x, y })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(Self { spec: spec.clone(), samples })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Pairs `(x, y)` of one split, cloned.
    pub fn pairs(&self, split: Split) -> Vec<(Tensor, Tensor)> {
        self.split(split).into_iter().map(|s| (s.x.clone(), s.y.clone())).collect()
    }
}
