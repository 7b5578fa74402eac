//! Out-of-distribution detectors and ROC analysis.
//!
//! Three scores, higher meaning more OOD:
//! * squared L2 distance of an intermediate base feature to its validation
//!   mean;
//! * the same distance on the bottleneck of an autoencoder trained over base
//!   outputs;
//! * the mean of the cap's variance map.

use std::fmt;

use thiserror::Error;

use crate::models::{self, ModelError, AE_BOTTLENECK_TAG};
use crate::nn::{Network, NnError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OodError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty reference set")]
    EmptySet,
    #[error("ROC needs both classes (in: {inliers}, out: {outliers})")]
    SingleClass { inliers: usize, outliers: usize },
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("non-finite score {0}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Detector {
    PretrainedFeature,
    AutoencoderFeature,
    MeanUncertainty,
}

impl Detector {
    pub const ALL: [Detector; 3] = [Detector::PretrainedFeature, Detector::AutoencoderFeature, Detector::MeanUncertainty];
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Detector::PretrainedFeature => "feature",
            Detector::AutoencoderFeature => "ae-feature",
            Detector::MeanUncertainty => "mean-uncertainty",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodScore {
    pub id: String,
    pub detector: Detector,
    pub score: f64,
    /// True for out-of-distribution samples.
    pub label: bool,
}

/// Mean of trunk layer `tag` activations over `inputs`.
pub fn feature_mean(net: &Network, tag: usize, inputs: &[Tensor]) -> Result<Tensor, OodError> {
    let mut iter = inputs.iter();
    let first = iter.next().ok_or(OodError::EmptySet)?;
    let mut acc = net.trunk_features(first, tag)?;
    for x in iter {
        acc.add_assign(&net.trunk_features(x, tag)?)?;
    }
    acc.scale(1.0 / inputs.len() as f64);
    Ok(acc)
}

pub fn squared_distance(a: &Tensor, b: &Tensor) -> Result<f64, OodError> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum())
}

/// ||f_tag(x) − mean||².
pub fn feature_distance_score(net: &Network, tag: usize, mean: &Tensor, x: &Tensor) -> Result<f64, OodError> {
    squared_distance(&net.trunk_features(x, tag)?, mean)
}

/// Bottleneck features of the autoencoder for input x (via the base).
pub fn ae_features(base: &Network, ae: &Network, x: &Tensor) -> Result<Tensor, OodError> {
    let y_hat = models::base_forward(base, x)?;
    Ok(ae.trunk_features(&y_hat, AE_BOTTLENECK_TAG)?)
}

/// Mean bottleneck feature over a reference set.
pub fn ae_feature_mean(base: &Network, ae: &Network, inputs: &[Tensor]) -> Result<Tensor, OodError> {
    let mut iter = inputs.iter();
    let first = iter.next().ok_or(OodError::EmptySet)?;
    let mut acc = ae_features(base, ae, first)?;
    for x in iter {
        acc.add_assign(&ae_features(base, ae, x)?)?;
    }
    acc.scale(1.0 / inputs.len() as f64);
    Ok(acc)
}

pub fn ae_feature_detector(base: &Network, ae: &Network, mean: &Tensor, x: &Tensor) -> Result<f64, OodError> {
    squared_distance(&ae_features(base, ae, x)?, mean)
}

/// Autoencoder reconstruction MSE of base(x).
pub fn ae_reconstruction_mse(base: &Network, ae: &Network, x: &Tensor) -> Result<f64, OodError> {
    let y_hat = models::base_forward(base, x)?;
    let rec = ae.predict(&y_hat)?.remove(0);
    if rec.len() != y_hat.len() {
        return Err(TensorError::ShapeMismatch { expected: y_hat.shape().to_vec(), got: rec.shape().to_vec() }.into());
    }
    Ok(rec.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y_hat.len() as f64)
}

/// Mean of the cap's variance map on base(x).
pub fn mean_uncertainty_score(base: &Network, cap: &Network, x: &Tensor) -> Result<f64, OodError> {
    let y_hat = models::base_forward(base, x)?;
    Ok(models::cap_forward(cap, &y_hat)?.variance.mean())
}

/// ROC points (fpr, tpr) from a descending threshold sweep, with equal
/// scores grouped into one step, and the trapezoid AUROC.
pub fn roc_auroc(scores: &[f64], labels: &[bool]) -> Result<(Vec<(f64, f64)>, f64), OodError> {
    if scores.len() != labels.len() {
        return Err(OodError::Length { scores: scores.len(), labels: labels.len() });
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(OodError::NonFinite(s));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(OodError::SingleClass { inliers: neg, outliers: pos });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auroc = curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok((curve, auroc))
}
