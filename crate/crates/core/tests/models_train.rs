//! Losses, training loops, freeze contract and head ranges.

use idcap::checkpoint::params_digest;
use idcap::data::{Dataset, DatasetSpec, DegradationOp, Family, Split};
use idcap::ggd::{self, GgdParams};
use idcap::metrics;
use idcap::models::{self, LambdaSchedule, PredictiveMap, Role, ScratchHead, TrainConfig};
use idcap::Tensor;
use proptest::prelude::*;
use std::sync::OnceLock;

const SIZE: usize = 16;

struct Toy {
    xs: Vec<Tensor>,
    ys: Vec<Tensor>,
    base: idcap::nn::Network,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let ds = Dataset::generate(&DatasetSpec::new(Family::A, 50, DegradationOp::GaussNoise { sigma: 0.1 }, 3)).unwrap();
        let (xs, ys): (Vec<_>, Vec<_>) = ds.pairs(Split::Train).into_iter().unzip();
        let cfg = TrainConfig { epochs: 25, lr: 2e-3, width: 8, seed: 1, ..TrainConfig::default() };
        let base = models::train_base(&xs, &ys, SIZE, &cfg).unwrap().checkpoint.network;
        Toy { xs, ys, base }
    })
}

fn cap_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr: 3e-3, width: 8, seed: 2, ..TrainConfig::default() }
}

fn y_hats(t: &Toy) -> Vec<Tensor> {
    t.xs.iter().map(|x| models::base_forward(&t.base, x).unwrap()).collect()
}

fn cap_uce(cap: &idcap::nn::Network, t: &Toy) -> f64 {
    let mut errs = Vec::new();
    let mut vars = Vec::new();
    for (yh, y) in y_hats(t).iter().zip(&t.ys) {
        let map = models::cap_forward(cap, yh).unwrap();
        errs.extend(yh.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)));
        vars.extend_from_slice(map.variance.data());
    }
    metrics::uce(&errs, &vars, metrics::DEFAULT_BINS).unwrap().0
}

#[test]
fn gaussian_nll_examples() {
    let z = Tensor::zeros(&[2, 2]);
    let one = Tensor::full(&[2, 2], 1.0);
    assert_eq!(models::gaussian_nll_loss(&z, &z, &one).unwrap(), 0.0);
    assert!((models::gaussian_nll_loss(&one, &z, &one).unwrap() - 0.5).abs() < 1e-15);
    let e = Tensor::full(&[2, 2], std::f64::consts::E);
    assert!((models::gaussian_nll_loss(&z, &z, &e).unwrap() - 0.5).abs() < 1e-15);
    assert!(models::gaussian_nll_loss(&z, &z, &z).is_err());
}

#[test]
fn ggd_nll_loss_broadcasts_the_scalar_term() {
    for (y, mu, a, b) in [(0.0, 0.0, 1.0, 2.0), (1.0, 0.0, 1.0, 1.0), (0.5, -0.2, 0.7, 1.6)] {
        let map = PredictiveMap::new(Tensor::full(&[2, 2], mu), Tensor::full(&[2, 2], a), Tensor::full(&[2, 2], b)).unwrap();
        let scalar = ggd::ggd_nll_term(y, &GgdParams::new(mu, a, b).unwrap()).unwrap();
        let loss = models::ggd_nll_loss(&map, &Tensor::full(&[2, 2], y)).unwrap();
        assert!((loss - scalar).abs() < 1e-14);
    }
}

#[test]
fn cap_loss_examples() {
    let y = Tensor::from_fn(&[1, 3, 3], |i| i as f64 / 9.0);
    let yh = Tensor::from_fn(&[1, 3, 3], |i| 0.05 + i as f64 / 10.0);
    let map = PredictiveMap::new(yh.map(|v| v + 0.1), Tensor::full(&[1, 3, 3], 0.3), Tensor::full(&[1, 3, 3], 1.7)).unwrap();
    let n0 = models::ggd_nll_loss(&map, &y).unwrap();
    let l = models::cap_loss(&map, &yh, &y, 10.0).unwrap();
    assert!((l - (10.0 * 0.01 + n0)).abs() < 1e-12);
    assert_eq!(models::cap_loss(&map, &yh, &y, 0.0).unwrap(), n0);
    let same = PredictiveMap::new(yh.clone(), map.alpha.clone(), map.beta.clone()).unwrap();
    assert_eq!(models::cap_loss(&same, &yh, &y, 5.0).unwrap(), models::ggd_nll_loss(&same, &y).unwrap());
    assert!(models::cap_loss(&map, &yh, &y, -1.0).is_err());
}

#[test]
fn annealing_schedule() {
    let s = TrainConfig::default().lambda;
    assert_eq!(models::anneal_lambda(0, &s), 10.0);
    for e in 0..60 {
        assert!(models::anneal_lambda(e + 1, &s) < models::anneal_lambda(e, &s));
    }
    assert!(models::anneal_lambda(20, &s) < 0.5);
    assert!(models::anneal_lambda(1000, &s) < 1e-60);
    assert_eq!(models::anneal_lambda(7, &LambdaSchedule::Constant(0.0)), 0.0);
}

#[test]
fn zero_head_weights_give_analytic_parameters() {
    let mut cap = models::build_network(Role::Cap, 4, SIZE, 0).unwrap();
    for h in 0..3 {
        for layer in &mut cap.heads[h] {
            for p in &mut layer.params {
                p.data_mut().fill(0.0);
            }
        }
    }
    let map = models::cap_forward(&cap, &Tensor::full(&[1, SIZE, SIZE], 0.4)).unwrap();
    let beta = 0.2 + (1.0f64 + 1.0).ln();
    assert!(map.alpha.data().iter().all(|a| (a - 1.0).abs() < 1e-15));
    assert!(map.beta.data().iter().all(|b| (b - beta).abs() < 1e-15));
    assert!((beta - 0.8931).abs() < 1e-4);
}

#[test]
fn random_caps_respect_head_ranges() {
    use rand::Rng;
    let mut r = idcap::rng::stream(9, "caps");
    for trial in 0..1000 {
        let cap = models::build_network(Role::Cap, 2, 4, trial).unwrap();
        let x = Tensor::from_fn(&[1, 4, 4], |_| r.gen_range(-5.0..5.0));
        let map = models::cap_forward(&cap, &x).unwrap();
        for i in 0..map.len() {
            let (a, b) = (map.alpha.data()[i], map.beta.data()[i]);
            assert!((models::ALPHA_MIN..=models::ALPHA_MAX).contains(&a));
            assert!((models::BETA_FLOOR..=models::BETA_MAX).contains(&b));
            let v = ggd::ggd_variance(a, b).unwrap();
            assert!((map.variance.data()[i] - v).abs() <= 1e-12 * v.max(1.0));
        }
    }
}

#[test]
fn base_forward_is_deterministic_and_training_reduces_loss() {
    let t = toy();
    let x = &t.xs[0];
    assert_eq!(models::base_forward(&t.base, x).unwrap(), models::base_forward(&t.base, x).unwrap());
    let cfg = TrainConfig { epochs: 10, lr: 2e-3, width: 8, seed: 1, ..TrainConfig::default() };
    let run = models::train_base(&t.xs, &t.ys, SIZE, &cfg).unwrap();
    assert!(run.log.last().unwrap().loss < run.log[0].loss);
    let again = models::train_base(&t.xs, &t.ys, SIZE, &cfg).unwrap();
    assert_eq!(run.checkpoint.to_bytes(), again.checkpoint.to_bytes());
    let zero = models::train_base(&t.xs, &t.ys, SIZE, &TrainConfig { epochs: 0, ..cfg }).unwrap();
    assert_eq!(zero.checkpoint.network, models::build_network(Role::Base, 8, SIZE, 1).unwrap());
    assert!(zero.log.is_empty());
}

#[test]
fn cap_training_leaves_base_untouched_and_sees_only_outputs() {
    let t = toy();
    let before = params_digest(&t.base);
    let bytes = idcap::checkpoint::ModelCheckpoint::new("base", 1, t.base.clone()).to_bytes();
    let via_base = models::train_cap(&t.base, &t.xs, &t.ys, SIZE, &cap_cfg(4)).unwrap();
    assert_eq!(params_digest(&t.base), before);
    assert_eq!(idcap::checkpoint::ModelCheckpoint::new("base", 1, t.base.clone()).to_bytes(), bytes);
    let direct = models::train_cap_on_outputs(&y_hats(t), &t.ys, SIZE, &cap_cfg(4)).unwrap();
    assert_eq!(via_base.log, direct.log);
    assert_eq!(via_base.checkpoint.to_bytes(), direct.checkpoint.to_bytes());
}

#[test]
fn cap_converges_towards_identity_and_calibration() {
    let t = toy();
    let full = models::train_cap(&t.base, &t.xs, &t.ys, SIZE, &cap_cfg(40)).unwrap();
    let ids: Vec<f64> = full.log.iter().map(|l| l.identity_term).collect();
    let pairs = ids.windows(2).count();
    let down = ids.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.8 * pairs as f64, "identity term non-increasing in {down}/{pairs} pairs: {ids:?}");
    let first = models::train_cap(&t.base, &t.xs, &t.ys, SIZE, &cap_cfg(1)).unwrap();
    assert_eq!(first.log[0], full.log[0]);
    let (u0, u1) = (cap_uce(first.network(), t), cap_uce(full.network(), t));
    assert!(u1 < u0, "UCE after epoch 0 {u0}, final {u1}");
}

#[test]
fn huge_lambda_starves_the_uncertainty_heads() {
    let t = toy();
    let cap = models::build_network(Role::Cap, 8, SIZE, 2).unwrap();
    let yh = y_hats(t);
    let share = models::cap_uncertainty_grad_share(&cap, &yh[..10], &t.ys[..10], 1e6).unwrap();
    assert!(share < 0.01, "uncertainty-head gradient share {share}");
    let share10 = models::cap_uncertainty_grad_share(&cap, &yh[..10], &t.ys[..10], 10.0).unwrap();
    assert!(share10 > share);
}

#[test]
fn scratch_models_train_and_respect_ranges() {
    let t = toy();
    let cfg = TrainConfig { epochs: 8, lr: 3e-3, width: 8, seed: 4, ..TrainConfig::default() };
    let g = models::train_scratch(&t.xs, &t.ys, SIZE, &cfg, ScratchHead::Gaussian).unwrap();
    assert!(g.log.last().unwrap().loss < g.log[0].loss);
    let (_, var) = models::scratch_gauss_forward(g.network(), &t.xs[0]).unwrap();
    assert!(var.data().iter().all(|v| *v > 0.0));
    let q = models::train_scratch(&t.xs, &t.ys, SIZE, &cfg, ScratchHead::Ggd).unwrap();
    for x in &t.xs {
        let map = models::scratch_ggd_forward(q.network(), x).unwrap();
        assert!(map.beta.data().iter().all(|b| (0.2..=10.0).contains(b)));
        assert!(map.alpha.data().iter().all(|a| *a > 0.0));
    }
}

#[test]
fn divergence_is_reported() {
    let t = toy();
    // Clamped heads keep huge losses finite; the unclamped MSE base overflows.
    let cfg = TrainConfig { epochs: 20, lr: 1e200, width: 8, seed: 1, ..TrainConfig::default() };
    let err = models::train_base(&t.xs, &t.ys, SIZE, &cfg).unwrap_err();
    assert!(matches!(err, models::ModelError::Divergence { .. }), "{err}");
}

proptest! {
    #[test]
    fn loss_composition_is_exact(seed in any::<u64>(), lambda in 0.0..50.0f64) {
        use rand::Rng;
        let mut r = idcap::rng::stream(seed, "loss");
        let mut img = || Tensor::from_fn(&[1, 3, 3], |_| r.gen_range(0.0..1.0));
        let (y, yh, yt) = (img(), img(), img());
        let alpha = img().map(|v| 0.1 + v);
        let beta = img().map(|v| 0.5 + 3.0 * v);
        let map = PredictiveMap::new(yt.clone(), alpha, beta).unwrap();
        let diff = models::cap_loss(&map, &yh, &y, lambda).unwrap() - models::cap_loss(&map, &yh, &y, 0.0).unwrap();
        let expected = lambda * models::mse(&yt, &yh).unwrap();
        prop_assert!((diff - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }
}
