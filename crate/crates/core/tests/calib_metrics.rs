//! Metric definitions against brute-force and sampling oracles.

use idcap::ggd::{self, GgdParams};
use idcap::metrics::{self, ECE_LEVELS};
use idcap::models::PredictiveMap;
use idcap::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Double loop over bins, membership by interval test.
fn naive_uce(e: &[f64], v: &[f64], bins: usize) -> f64 {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = e.len() as f64;
    if hi == lo {
        let me = e.iter().sum::<f64>() / n;
        let mv = v.iter().sum::<f64>() / n;
        return (me - mv).abs();
    }
    let width = (hi - lo) / bins as f64;
    let mut total = 0.0;
    for m in 0..bins {
        let a = lo + m as f64 * width;
        let b = lo + (m + 1) as f64 * width;
        let members: Vec<usize> =
            (0..v.len()).filter(|&i| v[i] >= a && (v[i] < b || (m + 1 == bins && v[i] <= hi))).collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let err = members.iter().map(|&i| e[i]).sum::<f64>() / k;
        let unc = members.iter().map(|&i| v[i]).sum::<f64>() / k;
        total += k / n * (err - unc).abs();
    }
    total
}

#[test]
fn uce_matches_naive_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..60 {
        let n = r.gen_range(1..2000);
        let bins = [1, 2, 7, 100][trial % 4];
        let e: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..0.2)).collect();
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..0.3f64).powi(2)).collect();
        let (u, stats) = metrics::uce(&e, &v, bins).unwrap();
        let oracle = naive_uce(&e, &v, bins);
        assert!((u - oracle).abs() <= 1e-12, "trial {trial}: {u} vs {oracle}");
        assert!(u >= 0.0);
        assert_eq!(stats.iter().map(|s| s.count).sum::<usize>(), n);
    }
}

#[test]
fn uce_examples() {
    let v = [0.1, 0.2, 0.4];
    assert_eq!(metrics::uce(&v, &v, 10).unwrap().0, 0.0);
    let (u, _) = metrics::uce(&[0.4, 0.6], &[0.3, 0.3], 5).unwrap();
    assert!((u - 0.2).abs() < 1e-15);
    let e = [0.1, 0.5, 0.2, 0.9, 0.3, 0.0];
    let s = [0.0, 0.1, 0.2, 0.8, 0.9, 1.0];
    let expected = 0.5 * ((0.8f64 / 3.0) - 0.1).abs() + 0.5 * ((1.2f64 / 3.0) - 0.9).abs();
    assert!((metrics::uce(&e, &s, 2).unwrap().0 - expected).abs() < 1e-12);
    assert!(metrics::uce(&[], &[], 10).is_err());
    assert!(metrics::uce(&[0.1], &[-0.1], 10).is_err());
}

#[test]
fn uce_zero_when_every_bin_balances() {
    // Errors differ per pixel but average to the bin's variance.
    let v = [0.1, 0.1, 0.5, 0.5];
    let e = [0.0, 0.2, 0.3, 0.7];
    assert!(metrics::uce(&e, &v, 4).unwrap().0.abs() < 1e-15);
}

#[test]
fn pearson_examples() {
    let a = [1.0, 2.5, -0.3, 4.0];
    let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
    assert!((metrics::pearson_corr(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    let c: Vec<f64> = a.iter().map(|x| -x).collect();
    assert!((metrics::pearson_corr(&a, &c).unwrap() + 1.0).abs() < 1e-15);
    assert!(metrics::pearson_corr(&[2.0; 4], &a).unwrap().is_nan());
    assert!(metrics::pearson_corr(&[1.0], &[1.0]).is_err());
}

#[test]
fn psnr_examples() {
    let z = Tensor::zeros(&[1, 4, 4]);
    let a = Tensor::full(&[1, 4, 4], 0.1);
    assert!((metrics::psnr(&a, &z, 1.0).unwrap() - 20.0).abs() < 1e-12);
    assert_eq!(metrics::psnr(&z, &z, 1.0).unwrap(), f64::INFINITY);
    assert!(metrics::psnr(&Tensor::full(&[1, 4, 4], 1.0), &z, 1.0).unwrap().abs() < 1e-15);
}

#[test]
fn ssim_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(&[1, 16, 16], |_| r.gen_range(0.0..1.0));
    assert!((metrics::ssim(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    let a = Tensor::full(&[1, 8, 8], 0.2);
    let b = Tensor::full(&[1, 8, 8], 0.8);
    let c1 = 0.01f64.powi(2);
    let expected = (2.0 * 0.16 + c1) / (0.04 + 0.64 + c1);
    assert!((metrics::ssim(&a, &b).unwrap() - expected).abs() < 1e-15);
    assert!(metrics::ssim(&Tensor::zeros(&[1, 7, 9]), &Tensor::zeros(&[1, 7, 9])).is_err());
}

#[test]
fn sharpness_examples() {
    assert_eq!(metrics::sharpness(&[0.3; 5]).unwrap(), 0.3);
    assert_eq!(metrics::sharpness(&[0.0; 5]).unwrap(), 0.0);
    assert!((metrics::sharpness(&[0.1, 0.3]).unwrap() - 0.2).abs() < 1e-16);
}

#[test]
fn nll_eval_mirrors_the_scalar_term() {
    let map = PredictiveMap::new(Tensor::full(&[1, 2, 2], 0.0), Tensor::full(&[1, 2, 2], 1.0), Tensor::full(&[1, 2, 2], 2.0)).unwrap();
    let term = ggd::ggd_nll_term(0.5, &GgdParams::new(0.0, 1.0, 2.0).unwrap()).unwrap();
    assert!((metrics::nll_eval(&map, &Tensor::full(&[1, 2, 2], 0.5)).unwrap() - term).abs() < 1e-15);
}

fn random_map(n: usize, r: &mut ChaCha8Rng) -> PredictiveMap {
    let betas = [0.8, 1.0, 1.5, 2.0, 4.0];
    let mu = Tensor::from_fn(&[n], |_| r.gen_range(-1.0..1.0));
    let alpha = Tensor::from_fn(&[n], |_| r.gen_range(0.05..2.0));
    let beta = Tensor::from_fn(&[n], |i| betas[i * betas.len() / n]);
    PredictiveMap::new(mu, alpha, beta).unwrap()
}

#[test]
fn ece_is_small_for_self_consistent_samples() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let map = random_map(n, &mut r);
    let y = Tensor::from_fn(&[n], |i| ggd::ggd_sample(&map.params(i).unwrap(), &mut r));
    let ece = metrics::ece_quantile(&y, &map, &ECE_LEVELS).unwrap();
    assert!(ece < 0.01, "ECE {ece}");

    let wide = PredictiveMap::new(map.y_tilde.clone(), map.alpha.map(|a| a * 2f64.sqrt()), map.beta.clone()).unwrap();
    for i in 0..n {
        assert!((wide.variance.data()[i] - 2.0 * map.variance.data()[i]).abs() < 1e-12 * wide.variance.data()[i]);
    }
    let ece_wide = metrics::ece_quantile(&y, &wide, &ECE_LEVELS).unwrap();
    assert!(ece_wide > ece, "{ece_wide} vs {ece}");
}

#[test]
fn ece_single_level_with_zero_residuals() {
    let map = PredictiveMap::new(Tensor::full(&[10], 0.3), Tensor::full(&[10], 0.5), Tensor::full(&[10], 1.3)).unwrap();
    let ece = metrics::ece_quantile(&Tensor::full(&[10], 0.3), &map, &[0.3]).unwrap();
    assert!((ece - 0.7).abs() < 1e-15);
    assert!(metrics::ece_quantile(&Tensor::full(&[10], 0.3), &map, &[1.0]).is_err());
}

#[test]
fn variance_scaling_examples() {
    let s2 = [0.5, 2.0, 0.1];
    let e: Vec<f64> = s2.iter().map(|v: &f64| v.sqrt()).collect();
    assert!((metrics::variance_scaling_fit(&e, &s2).unwrap() - 1.0).abs() < 1e-15);

    // Squared standardized residuals 1 and 4.
    let (e, s2) = ([1.0, 2.0], [1.0, 1.0]);
    let s = metrics::variance_scaling_fit(&e, &s2).unwrap();
    assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
    let grid = (1..=100_000)
        .map(|k| k as f64 * 1e-4)
        .min_by(|a, b| {
            metrics::variance_scaling_objective(*a, &e, &s2).total_cmp(&metrics::variance_scaling_objective(*b, &e, &s2))
        })
        .unwrap();
    assert!((grid - s).abs() < 1e-3, "grid {grid} vs {s}");

    // Without the ½ on the residual term the minimizer moves to √2·s*.
    let halfless = |s: f64| 2.0 * s.ln() + 5.0 / (s * s);
    let g2 = (1..=100_000).map(|k| k as f64 * 1e-4).min_by(|a, b| halfless(*a).total_cmp(&halfless(*b))).unwrap();
    assert!((g2 - 2f64.sqrt() * s).abs() < 1e-3);

    let k = 3.0;
    let scaled: Vec<f64> = s2.iter().map(|v| v * k * k).collect();
    assert!((metrics::variance_scaling_fit(&e, &scaled).unwrap() - s / k).abs() < 1e-15);
    assert!(metrics::variance_scaling_fit(&[1.0], &[0.0]).is_err());
}

#[test]
fn closed_form_scale_is_the_exact_minimizer() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let e: Vec<f64> = (0..300).map(|_| r.gen_range(-0.5..0.5)).collect();
    let s2: Vec<f64> = (0..300).map(|_| r.gen_range(0.001..0.2)).collect();
    let s = metrics::variance_scaling_fit(&e, &s2).unwrap();
    let best = metrics::variance_scaling_objective(s, &e, &s2);
    for _ in 0..10_000 {
        let probe = r.gen_range(1e-3..20.0);
        assert!(metrics::variance_scaling_objective(probe, &e, &s2) > best, "probe {probe}");
    }
    let standardized: f64 = e.iter().zip(&s2).map(|(e, v)| e * e / (s * s * v)).sum();
    assert!((standardized - e.len() as f64).abs() < 1e-10, "{standardized}");
}

proptest! {
    #[test]
    fn pearson_positive_affine_invariance(
        a in prop::collection::vec(-10.0..10.0f64, 3..50),
        scale in 0.01..100.0f64,
        shift in -100.0..100.0f64,
        seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|x| x + r.gen_range(-5.0..5.0)).collect();
        let base = metrics::pearson_corr(&a, &b).unwrap();
        prop_assume!(base.is_finite());
        let t: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
        prop_assert!((metrics::pearson_corr(&t, &b).unwrap() - base).abs() < 1e-12);
        let u: Vec<f64> = b.iter().map(|x| scale * x + shift).collect();
        prop_assert!((metrics::pearson_corr(&a, &u).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn ssim_range_and_symmetry(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[1, 12, 12], |_| r.gen_range(0.0..1.0));
        let b = Tensor::from_fn(&[1, 12, 12], |_| r.gen_range(0.0..1.0));
        let s = metrics::ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - metrics::ssim(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn psnr_decreases_with_mse(d1 in 1e-4..1.0f64, d2 in 1e-4..1.0f64) {
        prop_assume!(d1 < d2);
        let z = Tensor::zeros(&[1, 3, 3]);
        let p1 = metrics::psnr(&Tensor::full(&[1, 3, 3], d1), &z, 1.0).unwrap();
        let p2 = metrics::psnr(&Tensor::full(&[1, 3, 3], d2), &z, 1.0).unwrap();
        prop_assert!(p1 > p2);
    }

    #[test]
    fn uce_is_nonnegative(e in prop::collection::vec(0.0..1.0f64, 1..200), seed in any::<u64>(), bins in 1usize..50) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = e.iter().map(|_| r.gen_range(0.0..1.0)).collect();
        let (u, _) = metrics::uce(&e, &v, bins).unwrap();
        prop_assert!(u >= 0.0);
        prop_assert!((u - naive_uce(&e, &v, bins)).abs() <= 1e-12);
    }
}
