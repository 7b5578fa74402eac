//! Network roles, losses and training loops.
//!
//! * base: a deterministic point estimator x → ŷ trained with MSE and then
//!   frozen;
//! * cap: reads only ŷ and returns {ỹ, α̃, β̃}, trained with an identity
//!   term λ·|ỹ−ŷ|² plus the GGD negative log-likelihood of the target;
//! * scratch: maps x directly to Gaussian (ŷ, σ̂²) or GGD (ŷ, α̂, β̂)
//!   parameters, trained by the corresponding NLL;
//! * autoencoder: dense bottleneck net over base outputs, used for OOD
//!   features.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::adam::AdamState;
use crate::checkpoint::{params_digest, ModelCheckpoint};
use crate::ggd::{self, GgdError, GgdParams};
use crate::nn::{LayerSpec, Mode, Network, NnError};
use crate::rng;
use crate::tensor::{Tensor, TensorError};

pub const ALPHA_MIN: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 1e4;
pub const BETA_FLOOR: f64 = 0.2;
pub const BETA_MAX: f64 = 10.0;
pub const VAR_MIN: f64 = 1e-8;
pub const VAR_MAX: f64 = 1e4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ggd(#[from] GgdError),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("frozen base parameters changed during cap training")]
    FreezeViolation,
    #[error("non-positive variance {0}")]
    NonPositiveVariance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Base,
    Cap,
    ScratchGauss,
    ScratchGgd,
    Autoencoder,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Base => "base",
            Role::Cap => "cap",
            Role::ScratchGauss => "scratch-gauss",
            Role::ScratchGgd => "scratch-ggd",
            Role::Autoencoder => "autoencoder",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "base" => Role::Base,
            "cap" => Role::Cap,
            "scratch-gauss" => Role::ScratchGauss,
            "scratch-ggd" => Role::ScratchGgd,
            "autoencoder" => Role::Autoencoder,
            other => return Err(ModelError::Config(format!("unknown role `{other}`"))),
        })
    }
}

/// Per-pixel GGD prediction {ỹ, α̃, β̃} with the derived variance map.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMap {
    pub y_tilde: Tensor,
    pub alpha: Tensor,
    pub beta: Tensor,
    pub variance: Tensor,
}

impl PredictiveMap {
    pub fn new(y_tilde: Tensor, alpha: Tensor, beta: Tensor) -> Result<Self, ModelError> {
        y_tilde.ensure_same_shape(&alpha)?;
        y_tilde.ensure_same_shape(&beta)?;
        let var = alpha
            .data()
            .iter()
            .zip(beta.data())
            .map(|(&a, &b)| ggd::ggd_variance(a, b))
            .collect::<Result<Vec<_>, _>>()?;
        let variance = Tensor::new(alpha.shape().to_vec(), var)?;
        Ok(Self { y_tilde, alpha, beta, variance })
    }

    /// Gaussian prediction N(mean, var) expressed as β = 2. The variance map
    /// is kept exactly; α is computed from max(var, 1e-300) so zero-variance
    /// baselines still yield valid parameters.
    pub fn gaussian(mean: Tensor, var: Tensor) -> Result<Self, ModelError> {
        mean.ensure_same_shape(&var)?;
        if let Some(&bad) = var.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(ModelError::NonPositiveVariance(bad));
        }
        let alpha = var.map(|v| (2.0 * v.max(1e-300)).sqrt());
        let beta = Tensor::full(var.shape(), 2.0);
        Ok(Self { y_tilde: mean, alpha, beta, variance: var })
    }

    pub fn len(&self) -> usize {
        self.y_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_tilde.is_empty()
    }

    pub fn params(&self, i: usize) -> Result<GgdParams, GgdError> {
        GgdParams::new(self.y_tilde.data()[i], self.alpha.data()[i], self.beta.data()[i])
    }
}

fn head(in_ch: usize, act: Option<LayerSpec>) -> Vec<LayerSpec> {
    let mut h = vec![LayerSpec::Conv1x1 { in_ch, out_ch: 1 }];
    h.extend(act);
    h
}

fn conv_trunk(width: usize, convs: usize) -> Vec<LayerSpec> {
    let mut t = Vec::new();
    let mut ch = 1;
    for _ in 0..convs {
        t.push(LayerSpec::Conv3x3 { in_ch: ch, out_ch: width });
        t.push(LayerSpec::LeakyRelu { slope: 0.1 });
        ch = width;
    }
    t
}

/// Base: two 3×3 conv blocks and a 3×3 output conv.
pub fn base_arch(width: usize) -> (Vec<LayerSpec>, Vec<Vec<LayerSpec>>) {
    (conv_trunk(width, 2), vec![vec![LayerSpec::Conv3x3 { in_ch: width, out_ch: 1 }]])
}

/// Trunk index whose output serves as the base's intermediate feature.
pub const BASE_FEATURE_TAG: usize = 2;

/// Cap and GGD-scratch: three 3×3 conv blocks, then ỹ, α̃ (exp) and β̃
/// (softplus) 1×1 heads.
pub fn cap_arch(width: usize) -> (Vec<LayerSpec>, Vec<Vec<LayerSpec>>) {
    (
        conv_trunk(width, 3),
        vec![head(width, None), head(width, Some(LayerSpec::Exp)), head(width, Some(LayerSpec::Softplus))],
    )
}

pub fn scratch_gauss_arch(width: usize) -> (Vec<LayerSpec>, Vec<Vec<LayerSpec>>) {
    (conv_trunk(width, 3), vec![head(width, None), head(width, Some(LayerSpec::Exp))])
}

/// Dense autoencoder over flattened `size×size` images.
pub fn autoencoder_arch(size: usize, bottleneck: usize) -> (Vec<LayerSpec>, Vec<Vec<LayerSpec>>) {
    let n = size * size;
    (
        vec![LayerSpec::Dense { inputs: n, outputs: bottleneck }, LayerSpec::LeakyRelu { slope: 0.1 }],
        vec![vec![LayerSpec::Dense { inputs: bottleneck, outputs: n }]],
    )
}

pub const AE_BOTTLENECK_TAG: usize = 1;

pub fn build_network(role: Role, width: usize, size: usize, seed: u64) -> Result<Network, ModelError> {
    let (trunk, heads) = match role {
        Role::Base => base_arch(width),
        Role::Cap | Role::ScratchGgd => cap_arch(width),
        Role::ScratchGauss => scratch_gauss_arch(width),
        Role::Autoencoder => autoencoder_arch(size, width),
    };
    let mut r = rng::stream(seed, &format!("{role}/init"));
    Ok(Network::new(&trunk, &heads, &mut r)?)
}

/// Identity-map weight schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSchedule {
    /// λ₀·γ^epoch
    Anneal { lambda0: f64, decay: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: LambdaSchedule,
    pub seed: u64,
    /// Dropout rate for DO-capable inference copies.
    pub dropout_p: f64,
    /// Channel width (conv nets) or bottleneck size (autoencoder).
    pub width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 1e-3,
            lambda: LambdaSchedule::Anneal { lambda0: 10.0, decay: 0.85 },
            seed: 0,
            dropout_p: 0.2,
            width: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Config(format!("learning rate {}", self.lr)));
        }
        match self.lambda {
            LambdaSchedule::Anneal { lambda0, decay } => {
                if !(lambda0 >= 0.0 && decay > 0.0 && decay < 1.0) {
                    return Err(ModelError::Config(format!("lambda0 {lambda0}, decay {decay}")));
                }
            }
            LambdaSchedule::Constant(l) if !(l >= 0.0 && l.is_finite()) => {
                return Err(ModelError::Config(format!("lambda {l} must be non-negative")));
            }
            _ => {}
        }
        if self.width == 0 {
            return Err(ModelError::Config("width must be positive".into()));
        }
        Ok(())
    }
}

pub fn anneal_lambda(epoch: usize, schedule: &LambdaSchedule) -> f64 {
    match *schedule {
        LambdaSchedule::Anneal { lambda0, decay } => lambda0 * decay.powi(epoch as i32),
        LambdaSchedule::Constant(l) => l,
    }
}

// ---------------------------------------------------------------------------
// Losses. Each returns the mean over pixels; the `_grad` variants also return
// per-pixel derivatives of that mean.

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, ModelError> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64)
}

pub fn gaussian_nll_loss(y_hat: &Tensor, y: &Tensor, sigma2: &Tensor) -> Result<f64, ModelError> {
    y_hat.ensure_same_shape(y)?;
    y_hat.ensure_same_shape(sigma2)?;
    let mut total = 0.0;
    for ((&p, &t), &s) in y_hat.data().iter().zip(y.data()).zip(sigma2.data()) {
        if !(s > 0.0) {
            return Err(ModelError::NonPositiveVariance(s));
        }
        total += (p - t) * (p - t) / (2.0 * s) + 0.5 * s.ln();
    }
    Ok(total / y.len() as f64)
}

pub fn ggd_nll_loss(pred: &PredictiveMap, y: &Tensor) -> Result<f64, ModelError> {
    pred.y_tilde.ensure_same_shape(y)?;
    let mut total = 0.0;
    for (i, &t) in y.data().iter().enumerate() {
        total += ggd::ggd_nll_term(t, &pred.params(i)?)?;
    }
    Ok(total / y.len() as f64)
}

pub fn cap_loss(pred: &PredictiveMap, y_hat: &Tensor, y: &Tensor, lambda: f64) -> Result<f64, ModelError> {
    if !(lambda >= 0.0) {
        return Err(ModelError::Config(format!("lambda {lambda} must be non-negative")));
    }
    Ok(lambda * mse(&pred.y_tilde, y_hat)? + ggd_nll_loss(pred, y)?)
}

/// Loss value and head gradients for one sample.
struct SampleLoss {
    loss: f64,
    identity: f64,
    nll: f64,
    head_grads: Vec<Tensor>,
}

/// Raw α̃ (exp head) and β̃ (softplus head) outputs → clamped parameters,
/// with the derivative masks of the clamps.
fn clamp_heads(alpha_raw: &Tensor, beta_raw: &Tensor) -> (Tensor, Tensor, Vec<f64>, Vec<f64>) {
    let alpha = alpha_raw.map(|a| a.clamp(ALPHA_MIN, ALPHA_MAX));
    let beta = beta_raw.map(|b| (BETA_FLOOR + b).min(BETA_MAX));
    let da = alpha_raw.data().iter().map(|&a| if a > ALPHA_MIN && a < ALPHA_MAX { 1.0 } else { 0.0 }).collect();
    let db = beta_raw.data().iter().map(|&b| if BETA_FLOOR + b < BETA_MAX { 1.0 } else { 0.0 }).collect();
    (alpha, beta, da, db)
}

/// Turns the three raw head outputs of a cap or GGD-scratch net into a
/// [`PredictiveMap`].
pub fn ggd_heads_to_map(outs: &[Tensor]) -> Result<PredictiveMap, ModelError> {
    let (alpha, beta, _, _) = clamp_heads(&outs[1], &outs[2]);
    PredictiveMap::new(outs[0].clone(), alpha, beta)
}

/// GGD NLL (+ optional identity term against `anchor`) and head gradients.
fn ggd_sample_loss(
    outs: &[Tensor],
    target: &Tensor,
    anchor: Option<(&Tensor, f64)>,
) -> Result<SampleLoss, ModelError> {
    let (alpha, beta, da, db) = clamp_heads(&outs[1], &outs[2]);
    let y_tilde = &outs[0];
    let n = target.len() as f64;
    let mut g_y = vec![0.0; y_tilde.len()];
    let mut g_a = vec![0.0; y_tilde.len()];
    let mut g_b = vec![0.0; y_tilde.len()];
    let mut nll = 0.0;
    let mut identity = 0.0;
    for i in 0..target.len() {
        let p = GgdParams::new(y_tilde.data()[i], alpha.data()[i], beta.data()[i])?;
        let t = target.data()[i];
        nll += ggd::ggd_nll_term(t, &p)?;
        let g = ggd::ggd_nll_grad(t, &p)?;
        g_y[i] = g.d_mu / n;
        g_a[i] = g.d_alpha * da[i] / n;
        g_b[i] = g.d_beta * db[i] / n;
        if let Some((yh, lambda)) = anchor {
            let d = y_tilde.data()[i] - yh.data()[i];
            identity += d * d;
            g_y[i] += lambda * 2.0 * d / n;
        }
    }
    nll /= n;
    identity /= n;
    let lambda = anchor.map_or(0.0, |(_, l)| l);
    let shape = y_tilde.shape().to_vec();
    Ok(SampleLoss {
        loss: lambda * identity + nll,
        identity,
        nll,
        head_grads: vec![
            Tensor::new(shape.clone(), g_y)?,
            Tensor::new(shape.clone(), g_a)?,
            Tensor::new(shape, g_b)?,
        ],
    })
}

/// Mean and variance from the two raw heads of a Gaussian scratch net.
pub fn gauss_heads(outs: &[Tensor]) -> (Tensor, Tensor) {
    (outs[0].clone(), outs[1].map(|v| v.clamp(VAR_MIN, VAR_MAX)))
}

fn gauss_sample_loss(outs: &[Tensor], target: &Tensor) -> Result<SampleLoss, ModelError> {
    let (mean, var) = gauss_heads(outs);
    let n = target.len() as f64;
    let loss = gaussian_nll_loss(&mean, target, &var)?;
    let mut g_m = vec![0.0; target.len()];
    let mut g_v = vec![0.0; target.len()];
    for i in 0..target.len() {
        let d = mean.data()[i] - target.data()[i];
        let s = var.data()[i];
        let raw = outs[1].data()[i];
        g_m[i] = d / s / n;
        let inside = raw > VAR_MIN && raw < VAR_MAX;
        g_v[i] = if inside { (0.5 / s - d * d / (2.0 * s * s)) / n } else { 0.0 };
    }
    let shape = target.shape().to_vec();
    Ok(SampleLoss {
        loss,
        identity: 0.0,
        nll: loss,
        head_grads: vec![Tensor::new(shape.clone(), g_m)?, Tensor::new(shape, g_v)?],
    })
}

fn mse_sample_loss(out: &Tensor, target: &Tensor) -> Result<SampleLoss, ModelError> {
    let flat_out = out.data();
    let flat_t = target.data();
    if flat_out.len() != flat_t.len() {
        return Err(TensorError::ShapeMismatch { expected: target.shape().to_vec(), got: out.shape().to_vec() }.into());
    }
    let n = flat_t.len() as f64;
    let loss = flat_out.iter().zip(flat_t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let g = flat_out.iter().zip(flat_t).map(|(a, b)| 2.0 * (a - b) / n).collect();
    Ok(SampleLoss { loss, identity: 0.0, nll: 0.0, head_grads: vec![Tensor::new(out.shape().to_vec(), g)?] })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    pub loss: f64,
    pub identity_term: f64,
    pub nll_term: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochLog>,
}

impl Trained {
    pub fn network(&self) -> &Network {
        &self.checkpoint.network
    }
}

/// Generic minibatch loop. `loss_fn(sample_index, head_outputs, lambda)`.
fn train_loop(
    role: Role,
    mut net: Network,
    inputs: &[Tensor],
    cfg: &TrainConfig,
    loss_fn: impl Fn(usize, &[Tensor], f64) -> Result<SampleLoss, ModelError>,
) -> Result<Trained, ModelError> {
    cfg.validate()?;
    let mut adam = AdamState::new(&net.params(), cfg.lr);
    let mut shuffle_rng = rng::stream(cfg.seed, &format!("{role}/shuffle"));
    let mut drop_rng = rng::stream(cfg.seed, &format!("{role}/dropout"));
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    if cfg.epochs > 0 && inputs.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let lambda = anneal_lambda(epoch, &cfg.lambda);
        let (mut tot, mut tot_id, mut tot_nll) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = net.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let diverged = |e: ModelError| match e {
                    ModelError::Nn(NnError::NonFinite(l)) => ModelError::Divergence { epoch, detail: l },
                    ModelError::Ggd(g) => ModelError::Divergence { epoch, detail: g.to_string() },
                    other => other,
                };
                let (outs, tape) = net.forward(&inputs[i], Mode::Train, &mut drop_rng).map_err(|e| diverged(e.into()))?;
                let mut sl = loss_fn(i, &outs, lambda).map_err(diverged)?;
                if !sl.loss.is_finite() {
                    return Err(ModelError::Divergence { epoch, detail: format!("loss {}", sl.loss) });
                }
                tot += sl.loss;
                tot_id += sl.identity;
                tot_nll += sl.nll;
                for g in &mut sl.head_grads {
                    g.scale(scale);
                }
                net.backward(&tape, &sl.head_grads, &mut grads)?;
            }
            adam.step(&mut net.params_mut(), &grads)?;
        }
        let n = inputs.len() as f64;
        log.push(EpochLog { epoch, lambda, loss: tot / n, identity_term: tot_id / n, nll_term: tot_nll / n });
    }
    let mut checkpoint = ModelCheckpoint::new(role.as_str(), cfg.seed, net);
    checkpoint.step = adam.step;
    checkpoint.adam = Some(adam);
    Ok(Trained { checkpoint, log })
}

/// Trains the point-estimate base with MSE.
pub fn train_base(inputs: &[Tensor], targets: &[Tensor], size: usize, cfg: &TrainConfig) -> Result<Trained, ModelError> {
    check_pairs(inputs, targets)?;
    let net = build_network(Role::Base, cfg.width, size, cfg.seed)?;
    train_loop(Role::Base, net, inputs, cfg, |i, outs, _| mse_sample_loss(&outs[0], &targets[i]))
}

/// Frozen-model forward ŷ = base(x).
pub fn base_forward(base: &Network, x: &Tensor) -> Result<Tensor, ModelError> {
    Ok(base.predict(x)?.remove(0))
}

/// Trains a cap on the outputs of a frozen base. The base is only read; its
/// parameter digest is compared before and after as a guard.
pub fn train_cap(
    base: &Network,
    inputs: &[Tensor],
    targets: &[Tensor],
    size: usize,
    cfg: &TrainConfig,
) -> Result<Trained, ModelError> {
    check_pairs(inputs, targets)?;
    let before = params_digest(base);
    let y_hats = inputs.iter().map(|x| base_forward(base, x)).collect::<Result<Vec<_>, _>>()?;
    let out = train_cap_on_outputs(&y_hats, targets, size, cfg)?;
    if params_digest(base) != before {
        return Err(ModelError::FreezeViolation);
    }
    Ok(out)
}

/// Cap training given the base outputs directly.
pub fn train_cap_on_outputs(
    y_hats: &[Tensor],
    targets: &[Tensor],
    size: usize,
    cfg: &TrainConfig,
) -> Result<Trained, ModelError> {
    check_pairs(y_hats, targets)?;
    let net = build_network(Role::Cap, cfg.width, size, cfg.seed)?;
    train_loop(Role::Cap, net, y_hats, cfg, |i, outs, lambda| {
        ggd_sample_loss(outs, &targets[i], Some((&y_hats[i], lambda)))
    })
}

/// Ω(ŷ) → {ỹ, α̃, β̃, σ̃²}.
pub fn cap_forward(cap: &Network, y_hat: &Tensor) -> Result<PredictiveMap, ModelError> {
    let outs = cap.predict(y_hat)?;
    if outs.len() != 3 {
        return Err(ModelError::Config(format!("cap has {} heads, expected 3", outs.len())));
    }
    ggd_heads_to_map(&outs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScratchHead {
    Gaussian,
    Ggd,
}

/// Heteroscedastic model trained from scratch on (x, y).
pub fn train_scratch(
    inputs: &[Tensor],
    targets: &[Tensor],
    size: usize,
    cfg: &TrainConfig,
    kind: ScratchHead,
) -> Result<Trained, ModelError> {
    check_pairs(inputs, targets)?;
    match kind {
        ScratchHead::Gaussian => {
            let net = build_network(Role::ScratchGauss, cfg.width, size, cfg.seed)?;
            train_loop(Role::ScratchGauss, net, inputs, cfg, |i, outs, _| gauss_sample_loss(outs, &targets[i]))
        }
        ScratchHead::Ggd => {
            let net = build_network(Role::ScratchGgd, cfg.width, size, cfg.seed)?;
            train_loop(Role::ScratchGgd, net, inputs, cfg, |i, outs, _| ggd_sample_loss(outs, &targets[i], None))
        }
    }
}

/// Gaussian scratch prediction as (mean, variance).
pub fn scratch_gauss_forward(net: &Network, x: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
    Ok(gauss_heads(&net.predict(x)?))
}

pub fn scratch_ggd_forward(net: &Network, x: &Tensor) -> Result<PredictiveMap, ModelError> {
    ggd_heads_to_map(&net.predict(x)?)
}

/// Dense autoencoder trained with MSE to reconstruct `images`.
pub fn train_autoencoder(images: &[Tensor], size: usize, cfg: &TrainConfig) -> Result<Trained, ModelError> {
    let net = build_network(Role::Autoencoder, cfg.width, size, cfg.seed)?;
    train_loop(Role::Autoencoder, net, images, cfg, |i, outs, _| mse_sample_loss(&outs[0], &images[i]))
}

/// Fraction of the cap's gradient norm carried by the α̃ and β̃ heads for
/// the batch `(y_hats, targets)` at identity weight `lambda`.
pub fn cap_uncertainty_grad_share(
    cap: &Network,
    y_hats: &[Tensor],
    targets: &[Tensor],
    lambda: f64,
) -> Result<f64, ModelError> {
    check_pairs(y_hats, targets)?;
    let mut grads = cap.zero_grads();
    let mut r = rng::stream(0, "grad-share");
    for (yh, t) in y_hats.iter().zip(targets) {
        let (outs, tape) = cap.forward(yh, Mode::Eval, &mut r)?;
        let sl = ggd_sample_loss(&outs, t, Some((yh, lambda)))?;
        cap.backward(&tape, &sl.head_grads, &mut grads)?;
    }
    let total: f64 = grads.iter().map(Tensor::squared_norm).sum();
    let heads: f64 = cap
        .head_param_range(1)
        .chain(cap.head_param_range(2))
        .map(|k| grads[k].squared_norm())
        .sum();
    Ok((heads / total).sqrt())
}

fn check_pairs(a: &[Tensor], b: &[Tensor]) -> Result<(), ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::Config(format!("{} inputs but {} targets", a.len(), b.len())));
    }
    Ok(())
}
