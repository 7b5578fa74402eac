//! ROC/AUROC against a pairwise oracle and detector trivials.

use idcap::models::{self, Role};
use idcap::ood;
use idcap::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// P(score_out > score_in) + ½ P(tie) over all (out, in) pairs.
fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn random_case(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        // Coarse rounding produces ties.
        let scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0.0..1.0f64) * 6.0).round() / 6.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        if labels.iter().any(|l| *l) && labels.iter().any(|l| !*l) {
            return (scores, labels);
        }
    }
}

#[test]
fn auroc_matches_pairwise_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let (s, l) = random_case(&mut r, 12);
        let (_, a) = ood::roc_auroc(&s, &l).unwrap();
        assert!((a - pairwise_auroc(&s, &l)).abs() < 1e-12);
    }
}

#[test]
fn separated_and_constant_scores() {
    let (_, a) = ood::roc_auroc(&[0.1, 0.2, 3.0, 4.0], &[false, false, true, true]).unwrap();
    assert_eq!(a, 1.0);
    let (_, a) = ood::roc_auroc(&[1.0; 7], &[true, false, false, true, true, false, false]).unwrap();
    assert_eq!(a, 0.5);
    assert!(ood::roc_auroc(&[1.0, 2.0], &[false, false]).is_err());
    assert!(ood::roc_auroc(&[1.0, 2.0], &[false]).is_err());
}

#[test]
fn feature_mean_of_opposite_features_is_zero() {
    let net = models::build_network(Role::Base, 4, 8, 3).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(&[1, 8, 8], |_| r.gen_range(-1.0..1.0));
    let neg = x.map(|v| -v);
    // Trunk layer 0 is a bias-free-at-init convolution, so features are odd in x.
    let f = net.trunk_features(&x, 0).unwrap();
    assert_eq!(net.trunk_features(&neg, 0).unwrap(), f.map(|v| -v));
    let m = ood::feature_mean(&net, 0, &[x, neg]).unwrap();
    assert!(m.data().iter().all(|v| v.abs() < 1e-15));
}

/// Cap whose variance map is constant: zero head weights, α from the bias,
/// β fixed at 2 (variance α²/2).
fn constant_cap(alpha: f64) -> idcap::nn::Network {
    let mut cap = models::build_network(Role::Cap, 3, 8, 0).unwrap();
    for head in &mut cap.heads {
        for layer in head.iter_mut() {
            for p in &mut layer.params {
                p.data_mut().fill(0.0);
            }
        }
    }
    cap.heads[1][0].params[1].data_mut()[0] = alpha.ln();
    // 0.2 + softplus(b) = 2.
    cap.heads[2][0].params[1].data_mut()[0] = (1.8f64.exp() - 1.0).ln();
    cap
}

#[test]
fn mean_uncertainty_trivials() {
    let base = models::build_network(Role::Base, 3, 8, 1).unwrap();
    let x = Tensor::from_fn(&[1, 8, 8], |i| (i as f64 * 0.21).sin().abs());
    let c = 0.3f64;
    let alpha = (2.0 * c).sqrt();
    let s = ood::mean_uncertainty_score(&base, &constant_cap(alpha), &x).unwrap();
    assert!((s - c).abs() < 1e-12, "{s}");
    let mut last = 0.0;
    for k in [0.5, 1.0, 2.0, 4.0] {
        let s = ood::mean_uncertainty_score(&base, &constant_cap(alpha * k), &x).unwrap();
        assert!((s - c * k * k).abs() < 1e-12 * s);
        assert!(s > last);
        last = s;
    }
}

#[test]
fn detectors_are_deterministic() {
    let base = models::build_network(Role::Base, 3, 8, 1).unwrap();
    let ae = models::build_network(Role::Autoencoder, 5, 8, 2).unwrap();
    let xs: Vec<Tensor> = (0..4).map(|k| Tensor::from_fn(&[1, 8, 8], |i| ((i + k) as f64 * 0.13).cos())).collect();
    let m = ood::ae_feature_mean(&base, &ae, &xs).unwrap();
    let a = ood::ae_feature_detector(&base, &ae, &m, &xs[0]).unwrap();
    assert_eq!(a, ood::ae_feature_detector(&base, &ae, &m, &xs[0]).unwrap());
    let single = ood::ae_feature_mean(&base, &ae, &xs[..1]).unwrap();
    assert_eq!(ood::ae_feature_detector(&base, &ae, &single, &xs[0]).unwrap(), 0.0);
    assert!(ood::ae_reconstruction_mse(&base, &ae, &xs[1]).unwrap() >= 0.0);
}

proptest! {
    #[test]
    fn auroc_invariant_under_increasing_maps(seed in any::<u64>(), n in 2usize..40) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = random_case(&mut r, n.max(4));
        let (_, a) = ood::roc_auroc(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        let (_, b) = ood::roc_auroc(&t, &l).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn roc_curve_is_monotone(seed in any::<u64>(), n in 2usize..40) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = random_case(&mut r, n.max(4));
        let (curve, a) = ood::roc_auroc(&s, &l).unwrap();
        prop_assert_eq!(curve[0], (0.0, 0.0));
        prop_assert_eq!(*curve.last().unwrap(), (1.0, 1.0));
        for w in curve.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
