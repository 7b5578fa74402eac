//! Reconstruction and calibration metrics, plus variance-scaling
//! recalibration.
//!
//! Every metric treats each pixel as one sample. UCE bins span the observed
//! variance range uniformly. SSIM uses a uniform 8×8 window with population
//! (1/N) moments.

use std::fmt::Write as _;

use thiserror::Error;

use crate::ggd::{self, GgdError, GgdParams};
use crate::models::PredictiveMap;
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_BINS: usize = 100;
pub const SSIM_WINDOW: usize = 8;
pub const ECE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ggd(#[from] GgdError),
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("image {h}x{w} smaller than the {window}x{window} window")]
    ImageTooSmall { h: usize, w: usize, window: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64, MetricError> {
    a.ensure_same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean SSIM over all 8×8 windows (stride 1), peak 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    ssim_with(a, b, SSIM_WINDOW, 1.0)
}

pub fn ssim_with(a: &Tensor, b: &Tensor, window: usize, peak: f64) -> Result<f64, MetricError> {
    a.ensure_same_shape(b)?;
    let (c, h, w) = a.chw()?;
    if c != 1 {
        return Err(MetricError::Invalid(format!("ssim expects one channel, got {c}")));
    }
    if window == 0 || h < window || w < window {
        return Err(MetricError::ImageTooSmall { h, w, window });
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (window * window) as f64;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for i0 in 0..=h - window {
        for j0 in 0..=w - window {
            let (mut sa, mut sb) = (0.0, 0.0);
            for i in i0..i0 + window {
                for j in j0..j0 + window {
                    sa += da[i * w + j];
                    sb += db[i * w + j];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for i in i0..i0 + window {
                for j in j0..j0 + window {
                    let (p, q) = (da[i * w + j] - ma, db[i * w + j] - mb);
                    vaa += p * p;
                    vbb += q * q;
                    vab += p * q;
                }
            }
            let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2)) / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean SSIM over a set of image pairs.
pub fn mean_ssim(a: &[Tensor], b: &[Tensor]) -> Result<f64, MetricError> {
    mean_ssim_with(a, b, SSIM_WINDOW)
}

pub fn mean_ssim_with(a: &[Tensor], b: &[Tensor], window: usize) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::Invalid(format!("{} vs {} images", a.len(), b.len())));
    }
    let mut s = 0.0;
    for (p, q) in a.iter().zip(b) {
        s += ssim_with(p, q, window, 1.0)?;
    }
    Ok(s / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStats {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean squared error of the bin (0 when empty).
    pub err: f64,
    /// Mean predicted variance of the bin (0 when empty).
    pub uncer: f64,
}

/// Uncertainty calibration error over `bins` uniform bins spanning
/// [min variance, max variance]. The top edge belongs to the last bin.
pub fn uce(sq_errors: &[f64], variances: &[f64], bins: usize) -> Result<(f64, Vec<BinStats>), MetricError> {
    if sq_errors.len() != variances.len() {
        return Err(MetricError::Invalid(format!("{} errors vs {} variances", sq_errors.len(), variances.len())));
    }
    if sq_errors.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    if bins == 0 {
        return Err(MetricError::Invalid("bins must be positive".into()));
    }
    if let Some(v) = variances.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(MetricError::Invalid(format!("variance {v}")));
    }
    let lo = variances.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut count = vec![0usize; bins];
    let mut err = vec![0.0; bins];
    let mut unc = vec![0.0; bins];
    for (&e, &v) in sq_errors.iter().zip(variances) {
        let m = bin_index(v, lo, hi, bins);
        count[m] += 1;
        err[m] += e;
        unc[m] += v;
    }
    let n = sq_errors.len() as f64;
    let mut total = 0.0;
    let mut stats = Vec::with_capacity(bins);
    for m in 0..bins {
        let (e, u) = if count[m] > 0 { (err[m] / count[m] as f64, unc[m] / count[m] as f64) } else { (0.0, 0.0) };
        total += count[m] as f64 / n * (e - u).abs();
        stats.push(BinStats {
            index: m,
            lo: lo + width * m as f64,
            hi: if m + 1 == bins { hi } else { lo + width * (m + 1) as f64 },
            count: count[m],
            err: e,
            uncer: u,
        });
    }
    Ok((total, stats))
}

pub(crate) fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
}

/// Pearson correlation. Returns NaN when either input has zero variance.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Invalid(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(MetricError::TooFew { need: 2, got: a.len() });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (p, q) = (x - ma, y - mb);
        sab += p * q;
        saa += p * p;
        sbb += q * q;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(f64::NAN);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean |coverage(p) − p| over `levels`, where coverage(p) is the fraction of
/// pixels whose residual y − ỹ falls in the central p-interval of the pixel's
/// predicted GGD.
pub fn ece_quantile(y: &Tensor, pred: &PredictiveMap, levels: &[f64]) -> Result<f64, MetricError> {
    y.ensure_same_shape(&pred.y_tilde)?;
    if levels.is_empty() {
        return Err(MetricError::Invalid("no levels".into()));
    }
    if let Some(p) = levels.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(MetricError::Invalid(format!("level {p} outside (0,1)")));
    }
    let mut covered = vec![0usize; levels.len()];
    // Half-widths scale with α, so they are cached per β at α = 1.
    let mut unit: Vec<f64> = Vec::with_capacity(levels.len());
    let mut unit_beta = f64::NAN;
    for (i, &t) in y.data().iter().enumerate() {
        let params = pred.params(i)?;
        if params.beta() != unit_beta {
            let std = GgdParams::new(0.0, 1.0, params.beta())?;
            unit = levels.iter().map(|&p| ggd::ggd_central_halfwidth(p, &std)).collect::<Result<_, _>>()?;
            unit_beta = params.beta();
        }
        let r = (t - params.mu()).abs();
        for (k, u) in unit.iter().enumerate() {
            if r <= params.alpha() * u {
                covered[k] += 1;
            }
        }
    }
    let n = y.len() as f64;
    Ok(levels.iter().zip(&covered).map(|(p, &c)| (c as f64 / n - p).abs()).sum::<f64>() / levels.len() as f64)
}

pub fn sharpness(variances: &[f64]) -> Result<f64, MetricError> {
    if variances.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    Ok(variances.iter().sum::<f64>() / variances.len() as f64)
}

/// How a report's NLL column was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NllConvention {
    /// Mean GGD NLL term (ln 2 dropped).
    Ggd,
    /// Mean Gaussian NLL r²/(2σ²) + ½ ln σ².
    Gaussian,
    /// Point estimate without a distribution.
    None,
}

impl NllConvention {
    pub fn as_str(&self) -> &'static str {
        match self {
            NllConvention::Ggd => "ggd",
            NllConvention::Gaussian => "gaussian",
            NllConvention::None => "none",
        }
    }
}

pub fn nll_eval(pred: &PredictiveMap, y: &Tensor) -> Result<f64, MetricError> {
    y.ensure_same_shape(&pred.y_tilde)?;
    let mut total = 0.0;
    for (i, &t) in y.data().iter().enumerate() {
        total += ggd::ggd_nll_term(t, &pred.params(i)?)?;
    }
    Ok(total / y.len() as f64)
}

/// Closed-form minimizer of the scaled Gaussian NLL N·ln s + (1/(2s²))·Σ e²/σ²,
/// i.e. s* = sqrt(mean(e²/σ²)). `errors` are residuals.
pub fn variance_scaling_fit(errors: &[f64], sigmas2: &[f64]) -> Result<f64, MetricError> {
    if errors.len() != sigmas2.len() {
        return Err(MetricError::Invalid(format!("{} errors vs {} variances", errors.len(), sigmas2.len())));
    }
    if errors.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    let mut acc = 0.0;
    for (&e, &s) in errors.iter().zip(sigmas2) {
        if !(s > 0.0) {
            return Err(MetricError::Invalid(format!("variance {s} must be positive")));
        }
        acc += e * e / s;
    }
    Ok((acc / errors.len() as f64).sqrt())
}

/// The objective variance scaling minimizes: Gaussian NLL of the residuals
/// under variances s²σ², constants dropped.
pub fn variance_scaling_objective(s: f64, errors: &[f64], sigmas2: &[f64]) -> f64 {
    let sum: f64 = errors.iter().zip(sigmas2).map(|(e, v)| e * e / v).sum();
    errors.len() as f64 * s.ln() + sum / (2.0 * s * s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub uce: f64,
    pub c_coeff: f64,
    pub ece: f64,
    pub sharpness: f64,
    pub nll: f64,
    pub nll_convention: NllConvention,
    pub n_pixels: usize,
    pub n_bins: usize,
    pub ssim_window: usize,
}

impl CalibrationReport {
    pub const CSV_HEADER: &'static str =
        "method,psnr,ssim,uce,c_coeff,ece,sharpness,nll,nll_convention,n_pixels,n_bins,ssim_window";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            fmt_f(self.psnr),
            fmt_f(self.ssim),
            fmt_f(self.uce),
            fmt_f(self.c_coeff),
            fmt_f(self.ece),
            fmt_f(self.sharpness),
            fmt_f(self.nll),
            self.nll_convention.as_str(),
            self.n_pixels,
            self.n_bins,
            self.ssim_window
        )
    }
}

/// Fixed-precision float formatting used in every CSV.
pub fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.10e}")
    }
}

/// Per-bin CSV (bin,lo,hi,count,err,uncer).
pub fn bins_csv(stats: &[BinStats]) -> String {
    let mut s = String::from("bin,lo,hi,count,err,uncer\n");
    for b in stats {
        let _ = writeln!(s, "{},{},{},{},{},{}", b.index, fmt_f(b.lo), fmt_f(b.hi), b.count, fmt_f(b.err), fmt_f(b.uncer));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_named_values() {
        let a = Tensor::zeros(&[1, 2, 2]);
        assert!((psnr(&a, &Tensor::full(&[1, 2, 2], 0.1), 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Tensor::full(&[1, 2, 2], 1.0), 1.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn ssim_constant_window() {
        let a = Tensor::full(&[1, 8, 8], 0.2);
        let b = Tensor::full(&[1, 8, 8], 0.8);
        let c1 = 1e-4;
        let want = (2.0 * 0.16 + c1) / (0.04 + 0.64 + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-14);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&Tensor::zeros(&[1, 7, 9]), &Tensor::zeros(&[1, 7, 9])).is_err());
    }

    #[test]
    fn uce_named_values() {
        let v = [0.1, 0.4, 0.9, 0.2];
        assert_eq!(uce(&v, &v, 10).unwrap().0, 0.0);
        let (u, _) = uce(&[0.4, 0.6], &[0.3, 0.3], 5).unwrap();
        assert!((u - 0.2).abs() < 1e-15);
        assert!(uce(&[], &[], 5).is_err());
        let (_, stats) = uce(&[1.0, 2.0, 3.0], &[0.0, 0.5, 1.0], 4).unwrap();
        assert_eq!(stats.iter().map(|b| b.count).sum::<usize>(), 3);
        assert_eq!(stats[3].count, 1);
    }

    #[test]
    fn pearson_named_values() {
        let a = [0.1, 0.5, 0.2, 0.9];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson_corr(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson_corr(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson_corr(&[1.0; 4], &a).unwrap().is_nan());
    }

    #[test]
    fn sharpness_named_values() {
        assert_eq!(sharpness(&[0.3; 5]).unwrap(), 0.3);
        assert_eq!(sharpness(&[0.0; 3]).unwrap(), 0.0);
        assert!((sharpness(&[0.1, 0.3]).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ece_zero_residual_single_level() {
        let y = Tensor::full(&[1, 2, 2], 0.5);
        let pred = PredictiveMap::new(y.clone(), Tensor::full(&[1, 2, 2], 0.2), Tensor::full(&[1, 2, 2], 1.5)).unwrap();
        assert!((ece_quantile(&y, &pred, &[0.3]).unwrap() - 0.7).abs() < 1e-15);
        assert!(ece_quantile(&y, &pred, &[1.0]).is_err());
    }

    #[test]
    fn variance_scaling_named_values() {
        assert_eq!(variance_scaling_fit(&[0.5, 2.0], &[0.25, 4.0]).unwrap(), 1.0);
        let s = variance_scaling_fit(&[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
        assert!(variance_scaling_fit(&[1.0], &[0.0]).is_err());
    }
}
