//! Post-hoc uncertainty without retraining: test-time augmentation (TTDA),
//! MC dropout, their combination, and constant-variance controls.
//!
//! All methods report base(x) as the point estimate; the per-pass outputs
//! only feed the variance. Variances are population (1/T) variances.

use std::fmt;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::gaussian_blur;
use crate::nn::{Mode, Network, NnError};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_PASSES: usize = 20;
pub const DEFAULT_DROPOUT: f64 = 0.2;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;
pub const DEFAULT_MAX_SHIFT: usize = 2;
/// The two constant-uncertainty controls.
pub const CONST_LOW: f64 = 0.015;
pub const CONST_HIGH: f64 = 0.95;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid augmentation: {0}")]
    Spec(String),
}

/// Photometric corruption ranges: blur σ, contrast gain, additive jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptRanges {
    pub blur_sigma: (f64, f64),
    pub gain: (f64, f64),
    pub jitter: (f64, f64),
}

impl Default for CorruptRanges {
    fn default() -> Self {
        Self { blur_sigma: (0.0, 1.0), gain: (0.8, 1.2), jitter: (-0.1, 0.1) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentKind {
    PixelNoise { sigma: f64 },
    Affine { max_shift: usize, flip: bool },
    Corrupt(CorruptRanges),
    /// Corruption, then pixel noise, then an affine warp.
    Combined { sigma: f64, max_shift: usize, flip: bool, corrupt: CorruptRanges },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub passes: usize,
}

impl AugmentSpec {
    pub fn pixel() -> Self {
        Self { kind: AugmentKind::PixelNoise { sigma: DEFAULT_NOISE_SIGMA }, passes: DEFAULT_PASSES }
    }
    pub fn affine() -> Self {
        Self { kind: AugmentKind::Affine { max_shift: DEFAULT_MAX_SHIFT, flip: true }, passes: DEFAULT_PASSES }
    }
    pub fn corrupt() -> Self {
        Self { kind: AugmentKind::Corrupt(CorruptRanges::default()), passes: DEFAULT_PASSES }
    }
    pub fn combined() -> Self {
        Self {
            kind: AugmentKind::Combined {
                sigma: DEFAULT_NOISE_SIGMA,
                max_shift: DEFAULT_MAX_SHIFT,
                flip: true,
                corrupt: CorruptRanges::default(),
            },
            passes: DEFAULT_PASSES,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<(), BaselineError> {
        if self.passes == 0 {
            return Err(BaselineError::Spec("passes must be at least 1".into()));
        }
        let check_shift = |s: usize| {
            if s >= h || s >= w {
                Err(BaselineError::Spec(format!("shift {s} not invertible on a {h}x{w} grid")))
            } else {
                Ok(())
            }
        };
        let check_corrupt = |c: &CorruptRanges| {
            let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
            if !(ok(c.blur_sigma) && ok(c.gain) && ok(c.jitter)) || c.blur_sigma.0 < 0.0 {
                Err(BaselineError::Spec(format!("bad corruption ranges {c:?}")))
            } else {
                Ok(())
            }
        };
        let check_sigma = |s: f64| {
            if s >= 0.0 && s.is_finite() {
                Ok(())
            } else {
                Err(BaselineError::Spec(format!("noise sigma {s}")))
            }
        };
        match &self.kind {
            AugmentKind::PixelNoise { sigma } => check_sigma(*sigma),
            AugmentKind::Affine { max_shift, .. } => check_shift(*max_shift),
            AugmentKind::Corrupt(c) => check_corrupt(c),
            AugmentKind::Combined { sigma, max_shift, corrupt, .. } => {
                check_sigma(*sigma)?;
                check_shift(*max_shift)?;
                check_corrupt(corrupt)
            }
        }
    }
}

/// Integer translation with optional horizontal flip: T(i, j) = (i + dy, f(j) + dx).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridWarp {
    pub dy: i64,
    pub dx: i64,
    pub flip: bool,
}

impl GridWarp {
    pub const IDENTITY: GridWarp = GridWarp { dy: 0, dx: 0, flip: false };

    fn forward(&self, i: usize, j: usize, w: usize) -> (i64, i64) {
        let fj = if self.flip { (w - 1 - j) as i64 } else { j as i64 };
        (i as i64 + self.dy, fj + self.dx)
    }

    fn inverse(&self, i: usize, j: usize, w: usize) -> (i64, i64) {
        let fj = j as i64 - self.dx;
        let sj = if self.flip { w as i64 - 1 - fj } else { fj };
        (i as i64 - self.dy, sj)
    }

    /// Warped image a with a(T(p)) = x(p); uncovered pixels replicate the
    /// nearest edge.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (c, h, w) = x.chw()?;
        let d = x.data();
        let mut out = vec![0.0; d.len()];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let (si, sj) = self.inverse(i, j, w);
                    let si = si.clamp(0, h as i64 - 1) as usize;
                    let sj = sj.clamp(0, w as i64 - 1) as usize;
                    out[(ch * h + i) * w + j] = d[(ch * h + si) * w + sj];
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Pulls an output back to target coordinates: r(p) = o(T(p)). The mask
    /// is 1 where T(p) lies inside the frame.
    pub fn pull_back(&self, o: &Tensor) -> Result<(Tensor, Vec<bool>), TensorError> {
        let (c, h, w) = o.chw()?;
        let d = o.data();
        let mut out = vec![0.0; d.len()];
        let mut mask = vec![false; d.len()];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let (ti, tj) = self.forward(i, j, w);
                    if ti >= 0 && tj >= 0 && (ti as usize) < h && (tj as usize) < w {
                        let k = (ch * h + i) * w + j;
                        out[k] = d[(ch * h + ti as usize) * w + tj as usize];
                        mask[k] = true;
                    }
                }
            }
        }
        Ok((Tensor::new(o.shape().to_vec(), out)?, mask))
    }
}

fn corrupt<R: Rng + ?Sized>(x: &Tensor, c: &CorruptRanges, rng: &mut R) -> Tensor {
    let draw = |r: &mut R, (lo, hi): (f64, f64)| if hi > lo { r.gen_range(lo..hi) } else { lo };
    let sigma = draw(rng, c.blur_sigma);
    let gain = draw(rng, c.gain);
    let jitter = draw(rng, c.jitter);
    let blurred = if sigma > 0.0 { gaussian_blur(x, 2, sigma) } else { x.clone() };
    let m = blurred.mean();
    blurred.map(|v| (v - m) * gain + m + jitter)
}

fn add_noise<R: Rng + ?Sized>(x: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let normal = rand_distr::Normal::new(0.0, sigma).expect("sigma validated");
    let noise: Vec<f64> = (0..x.len()).map(|_| rand_distr::Distribution::sample(&normal, rng)).collect();
    let mut out = x.clone();
    out.data_mut().iter_mut().zip(noise).for_each(|(v, n)| *v += n);
    out
}

fn draw_warp<R: Rng + ?Sized>(max_shift: usize, flip: bool, rng: &mut R) -> GridWarp {
    let s = max_shift as i64;
    GridWarp { dy: rng.gen_range(-s..=s), dx: rng.gen_range(-s..=s), flip: flip && rng.gen_bool(0.5) }
}

/// Perturbed input and the warp needed to map its output back.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, kind: &AugmentKind, rng: &mut R) -> Result<(Tensor, GridWarp), TensorError> {
    Ok(match kind {
        AugmentKind::PixelNoise { sigma } => (add_noise(x, *sigma, rng), GridWarp::IDENTITY),
        AugmentKind::Affine { max_shift, flip } => {
            let warp = draw_warp(*max_shift, *flip, rng);
            (warp.apply(x)?, warp)
        }
        AugmentKind::Corrupt(c) => (corrupt(x, c, rng), GridWarp::IDENTITY),
        AugmentKind::Combined { sigma, max_shift, flip, corrupt: c } => {
            let y = add_noise(&corrupt(x, c, rng), *sigma, rng);
            let warp = draw_warp(*max_shift, *flip, rng);
            (warp.apply(&y)?, warp)
        }
    })
}

/// One stochastic pass in target coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Pass {
    pub output: Tensor,
    pub mask: Vec<bool>,
}

/// Per-pixel mean, population variance and valid-pass count.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mean: Tensor,
    pub var: Tensor,
    pub count: Tensor,
}

/// Runs the `passes` independent perturbed forwards. Each pass has its own
/// RNG stream seeded from `rng` up front, so the passes may run in parallel
/// and are returned in pass order.
pub fn ttda_passes<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    kind: Option<&AugmentKind>,
    mode: Mode,
    passes: usize,
    rng: &mut R,
) -> Result<Vec<Pass>, BaselineError> {
    let seeds: Vec<u64> = (0..passes).map(|_| rng.gen()).collect();
    seeds
        .par_iter()
        .map(|&s| {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(s);
            let (input, warp) = match kind {
                Some(k) => augment(x, k, &mut r)?,
                None => (x.clone(), GridWarp::IDENTITY),
            };
            let (outs, _) = net.forward(&input, mode, &mut r)?;
            let (output, mask) = warp.pull_back(&outs[0])?;
            Ok(Pass { output, mask })
        })
        .collect()
}

/// Two-pass per-pixel aggregation over the valid passes. Pixels no pass
/// covers get mean 0, variance 0 and count 0.
pub fn aggregate(passes: &[Pass]) -> Result<Aggregate, BaselineError> {
    let first = passes.first().ok_or_else(|| BaselineError::Spec("no passes".into()))?;
    let shape = first.output.shape().to_vec();
    let n = first.output.len();
    // Running mean, so identical outputs give exactly zero variance.
    let mut mean = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for p in passes {
        p.output.ensure_shape(&shape)?;
        for k in 0..n {
            if p.mask[k] {
                cnt[k] += 1;
                mean[k] += (p.output.data()[k] - mean[k]) / cnt[k] as f64;
            }
        }
    }
    let mut ss = vec![0.0; n];
    for p in passes {
        for k in 0..n {
            if p.mask[k] {
                let d = p.output.data()[k] - mean[k];
                ss[k] += d * d;
            }
        }
    }
    let var = (0..n).map(|k| if cnt[k] > 0 { ss[k] / cnt[k] as f64 } else { 0.0 }).collect();
    Ok(Aggregate {
        mean: Tensor::new(shape.clone(), mean)?,
        var: Tensor::new(shape.clone(), var)?,
        count: Tensor::new(shape, cnt.into_iter().map(|c| c as f64).collect())?,
    })
}

/// Test-time augmentation with a frozen base.
pub fn ttda<R: Rng + ?Sized>(base: &Network, x: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Result<Aggregate, BaselineError> {
    let (_, h, w) = x.chw()?;
    spec.validate(h, w)?;
    aggregate(&ttda_passes(base, x, Some(&spec.kind), Mode::Eval, spec.passes, rng)?)
}

/// Dropout-capable copy of `base` (dropout before each head's last layer).
pub fn dropout_model(base: &Network, p: f64) -> Result<Network, BaselineError> {
    if !(0.0..1.0).contains(&p) {
        return Err(BaselineError::Spec(format!("dropout p={p} outside [0,1)")));
    }
    Ok(base.with_dropout_before_last(p)?)
}

/// MC dropout: `passes` forwards of a dropout-capable model with masks active.
pub fn mc_dropout<R: Rng + ?Sized>(model: &Network, x: &Tensor, passes: usize, rng: &mut R) -> Result<Aggregate, BaselineError> {
    if passes == 0 {
        return Err(BaselineError::Spec("passes must be at least 1".into()));
    }
    aggregate(&ttda_passes(model, x, None, Mode::McDropout, passes, rng)?)
}

/// MC dropout combined with the pixel+affine+corruption augmentation.
pub fn dopac<R: Rng + ?Sized>(model: &Network, x: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Result<Aggregate, BaselineError> {
    let (_, h, w) = x.chw()?;
    spec.validate(h, w)?;
    aggregate(&ttda_passes(model, x, Some(&spec.kind), Mode::McDropout, spec.passes, rng)?)
}

/// Uniform variance map of value `c`.
pub fn constant_uncertainty(shape: &[usize], c: f64) -> Result<Tensor, BaselineError> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(BaselineError::Spec(format!("constant {c} must be non-negative")));
    }
    Ok(Tensor::full(shape, c))
}

/// The post-hoc methods evaluated alongside the cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineMethod {
    TtdaP,
    TtdaA,
    TtdaC,
    TtdaPac,
    Do,
    DoPac,
    Const(f64),
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 8] = [
        BaselineMethod::TtdaP,
        BaselineMethod::TtdaA,
        BaselineMethod::TtdaC,
        BaselineMethod::TtdaPac,
        BaselineMethod::Do,
        BaselineMethod::DoPac,
        BaselineMethod::Const(CONST_LOW),
        BaselineMethod::Const(CONST_HIGH),
    ];

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, BaselineMethod::Const(_))
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineMethod::TtdaP => f.write_str("ttda-p"),
            BaselineMethod::TtdaA => f.write_str("ttda-a"),
            BaselineMethod::TtdaC => f.write_str("ttda-c"),
            BaselineMethod::TtdaPac => f.write_str("ttda-pac"),
            BaselineMethod::Do => f.write_str("do"),
            BaselineMethod::DoPac => f.write_str("dopac"),
            BaselineMethod::Const(c) => write!(f, "const({c})"),
        }
    }
}

/// Mean, variance and coverage of `method` for input `x`. `dropout_net` is
/// the dropout-capable copy of `base`. Constant maps report the base output
/// as their mean.
pub fn baseline_aggregate<R: Rng + ?Sized>(
    method: BaselineMethod,
    base: &Network,
    dropout_net: &Network,
    x: &Tensor,
    passes: usize,
    rng: &mut R,
) -> Result<Aggregate, BaselineError> {
    let with = |s: AugmentSpec| AugmentSpec { passes, ..s };
    match method {
        BaselineMethod::TtdaP => ttda(base, x, &with(AugmentSpec::pixel()), rng),
        BaselineMethod::TtdaA => ttda(base, x, &with(AugmentSpec::affine()), rng),
        BaselineMethod::TtdaC => ttda(base, x, &with(AugmentSpec::corrupt()), rng),
        BaselineMethod::TtdaPac => ttda(base, x, &with(AugmentSpec::combined()), rng),
        BaselineMethod::Do => mc_dropout(dropout_net, x, passes, rng),
        BaselineMethod::DoPac => dopac(dropout_net, x, &with(AugmentSpec::combined()), rng),
        BaselineMethod::Const(c) => {
            let mean = base.predict(x)?.remove(0);
            let var = constant_uncertainty(mean.shape(), c)?;
            let count = Tensor::full(mean.shape(), 1.0);
            Ok(Aggregate { mean, var, count })
        }
    }
}

/// Variance map of `method` for input `x`.
pub fn baseline_variance<R: Rng + ?Sized>(
    method: BaselineMethod,
    base: &Network,
    dropout_net: &Network,
    x: &Tensor,
    passes: usize,
    rng: &mut R,
) -> Result<Tensor, BaselineError> {
    Ok(baseline_aggregate(method, base, dropout_net, x, passes, rng)?.var)
}
