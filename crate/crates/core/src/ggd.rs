//! Heteroscedastic generalized Gaussian distribution (GGD).
//!
//! Density: β / (2αΓ(1/β)) · exp(−(|y−μ|/α)^β). β = 2 is a Gaussian with
//! variance α²/2, β = 1 is a Laplace with scale α.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::special::{self, DomainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GgdError {
    #[error("invalid GGD parameter {name} = {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Location, scale and shape of one GGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgdParams {
    mu: f64,
    alpha: f64,
    beta: f64,
}

impl GgdParams {
    pub fn new(mu: f64, alpha: f64, beta: f64) -> Result<Self, GgdError> {
        if !mu.is_finite() {
            return Err(GgdError::InvalidParam { name: "mu", value: mu });
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(GgdError::InvalidParam { name: "alpha", value: alpha });
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(GgdError::InvalidParam { name: "beta", value: beta });
        }
        Ok(Self { mu, alpha, beta })
    }

    /// Gaussian N(mu, sigma2) written as a GGD (α = σ√2, β = 2).
    pub fn gaussian(mu: f64, sigma2: f64) -> Result<Self, GgdError> {
        Self::new(mu, (2.0 * sigma2).sqrt(), 2.0)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn variance(&self) -> f64 {
        variance_unchecked(self.alpha, self.beta)
    }
}

/// Log-density at `y`.
pub fn ggd_log_pdf(y: f64, p: &GgdParams) -> Result<f64, GgdError> {
    let z = (y - p.mu).abs() / p.alpha;
    let log_norm = (p.beta / (2.0 * p.alpha)).ln() - special::log_gamma(1.0 / p.beta)?;
    Ok(log_norm - z.powf(p.beta))
}

/// Variance α²Γ(3/β)/Γ(1/β), evaluated in log space.
pub fn ggd_variance(alpha: f64, beta: f64) -> Result<f64, GgdError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(GgdError::InvalidParam { name: "alpha", value: alpha });
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(GgdError::InvalidParam { name: "beta", value: beta });
    }
    let log_var =
        2.0 * alpha.ln() + special::log_gamma(3.0 / beta)? - special::log_gamma(1.0 / beta)?;
    Ok(log_var.exp())
}

pub(crate) fn variance_unchecked(alpha: f64, beta: f64) -> f64 {
    ggd_variance(alpha, beta).expect("validated GGD parameters")
}

/// One draw: μ ± α·G^{1/β} with G ~ Gamma(1/β, 1) and a fair random sign.
pub fn ggd_sample<R: Rng + ?Sized>(p: &GgdParams, rng: &mut R) -> f64 {
    let gamma = Gamma::new(1.0 / p.beta, 1.0).expect("shape is positive and finite");
    let g: f64 = gamma.sample(rng);
    let magnitude = p.alpha * g.powf(1.0 / p.beta);
    if rng.gen::<bool>() {
        p.mu + magnitude
    } else {
        p.mu - magnitude
    }
}

/// Per-element negative log-likelihood in the three-term training form
/// (|y−μ|/α)^β − ln(β/α) + ln Γ(1/β).
///
/// This drops the constant ln 2 of the full density, so
/// `ggd_nll_term(y, p) == -ggd_log_pdf(y, p) - ln 2`.
pub fn ggd_nll_term(y: f64, p: &GgdParams) -> Result<f64, GgdError> {
    let z = (y - p.mu).abs() / p.alpha;
    Ok(z.powf(p.beta) - (p.beta / p.alpha).ln() + special::log_gamma(1.0 / p.beta)?)
}

/// Partial derivatives of [`ggd_nll_term`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllGrad {
    pub d_mu: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
    /// Set when y sits on the mode with β ≤ 1, where the μ-derivative does
    /// not exist; `d_mu` then holds the subgradient 0.
    pub at_mode: bool,
}

const MODE_EPS: f64 = 1e-12;

pub fn ggd_nll_grad(y: f64, p: &GgdParams) -> Result<NllGrad, GgdError> {
    let (mu, alpha, beta) = (p.mu, p.alpha, p.beta);
    let diff = y - mu;
    let r = diff.abs();
    let z = r / alpha;
    let at_mode = r < MODE_EPS && beta <= 1.0;

    let d_mu = if at_mode || r == 0.0 {
        0.0
    } else {
        -beta * z.powf(beta - 1.0) / alpha * diff.signum()
    };
    let z_pow = z.powf(beta);
    let d_alpha = (1.0 - beta * z_pow) / alpha;
    let residual_beta = if z > 0.0 { z_pow * z.ln() } else { 0.0 };
    let d_beta = residual_beta - 1.0 / beta - special::digamma(1.0 / beta)? / (beta * beta);

    Ok(NllGrad { d_mu, d_alpha, d_beta, at_mode })
}

/// CDF of |Y − μ| at `t ≥ 0`: P(1/β, (t/α)^β).
pub fn ggd_abs_cdf(t: f64, p: &GgdParams) -> Result<f64, GgdError> {
    if t <= 0.0 {
        return Ok(0.0);
    }
    Ok(special::gamma_p(1.0 / p.beta, (t / p.alpha).powf(p.beta))?)
}

/// Half-width of the central interval holding probability `level`.
pub fn ggd_central_halfwidth(level: f64, p: &GgdParams) -> Result<f64, GgdError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GgdError::InvalidParam { name: "level", value: level });
    }
    let g = special::gamma_p_inv(1.0 / p.beta, level)?;
    Ok(p.alpha * g.powf(1.0 / p.beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{LN_2, PI};

    fn params(mu: f64, alpha: f64, beta: f64) -> GgdParams {
        GgdParams::new(mu, alpha, beta).unwrap()
    }

    #[test]
    fn construction_validates() {
        assert!(GgdParams::new(0.0, 0.0, 1.0).is_err());
        assert!(GgdParams::new(0.0, 1.0, -1.0).is_err());
        assert!(GgdParams::new(f64::NAN, 1.0, 1.0).is_err());
        assert!(GgdParams::new(0.0, f64::INFINITY, 1.0).is_err());
        assert!(GgdParams::new(0.3, 0.1, 7.0).is_ok());
    }

    #[test]
    fn log_pdf_named_values() {
        let v = ggd_log_pdf(0.0, &params(0.0, 2f64.sqrt(), 2.0)).unwrap();
        assert!((v + 0.9189385332).abs() < 1e-9);
        let v = ggd_log_pdf(0.0, &params(0.0, 1.0, 1.0)).unwrap();
        assert!((v + LN_2).abs() < 1e-12);
        let v = ggd_log_pdf(1.0, &params(0.0, 1.0, 1.0)).unwrap();
        assert!((v + 1.0 + LN_2).abs() < 1e-12);
    }

    #[test]
    fn variance_named_values() {
        assert!((ggd_variance(1.0, 2.0).unwrap() - 0.5).abs() < 1e-13);
        assert!((ggd_variance(1.0, 1.0).unwrap() - 2.0).abs() < 1e-13);
        // mpmath: 1.5² Γ(3.75)/Γ(1.25)
        assert!((ggd_variance(1.5, 0.8).unwrap() - 10.979365321092851).abs() < 1e-11);
        assert!(ggd_variance(0.0, 1.0).is_err());
        assert!(ggd_variance(1.0, 0.0).is_err());
    }

    #[test]
    fn nll_term_named_values() {
        assert!(ggd_nll_term(0.3, &params(0.3, 1.0, 1.0)).unwrap().abs() < 1e-15);
        let v = ggd_nll_term(0.0, &params(0.0, 1.0, 2.0)).unwrap();
        assert!((v - (0.5 * PI.ln() - LN_2)).abs() < 1e-12);
        assert!((v + 0.1207823).abs() < 1e-7);
        assert!((ggd_nll_term(1.0, &params(0.0, 1.0, 1.0)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nll_is_negative_log_pdf_minus_ln2() {
        for &(y, mu, a, b) in &[(0.1, 0.4, 0.3, 1.7), (-2.0, 1.0, 2.0, 0.6), (5.0, 5.0, 0.01, 3.0)] {
            let p = params(mu, a, b);
            let lhs = ggd_nll_term(y, &p).unwrap();
            let rhs = -ggd_log_pdf(y, &p).unwrap() - LN_2;
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_named_values() {
        let g = ggd_nll_grad(0.5, &params(0.5, 1.0, 2.0)).unwrap();
        assert_eq!(g.d_mu, 0.0);
        assert!(!g.at_mode);
        let g = ggd_nll_grad(0.5, &params(0.5, 0.25, 3.0)).unwrap();
        assert!((g.d_alpha - 4.0).abs() < 1e-12);
    }

    #[test]
    fn grad_flags_mode_for_sharp_shapes() {
        let g = ggd_nll_grad(1.0, &params(1.0, 0.5, 0.7)).unwrap();
        assert!(g.at_mode);
        assert_eq!(g.d_mu, 0.0);
        assert!(g.d_alpha.is_finite() && g.d_beta.is_finite());
        let g = ggd_nll_grad(1.0, &params(1.0, 0.5, 1.0)).unwrap();
        assert!(g.at_mode);
    }

    #[test]
    fn sample_degenerate_scale_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(0.7, 1e-12, 1.3);
        for _ in 0..100 {
            assert!((ggd_sample(&p, &mut rng) - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn central_halfwidth_inverts_abs_cdf() {
        let p = params(0.0, 0.3, 0.9);
        for &level in &[0.1, 0.5, 0.9] {
            let t = ggd_central_halfwidth(level, &p).unwrap();
            assert!((ggd_abs_cdf(t, &p).unwrap() - level).abs() < 1e-10);
        }
        // Gaussian 68.27% interval is ±σ.
        let g = GgdParams::gaussian(0.0, 4.0).unwrap();
        let t = ggd_central_halfwidth(0.682_689_492_137_085_9, &g).unwrap();
        assert!((t - 2.0).abs() < 1e-9);
        assert!(ggd_central_halfwidth(1.0, &p).is_err());
    }
}
