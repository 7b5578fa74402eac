//! Experiment commands behind the CLI.
//!
//! Every command derives its random streams from the master seed plus a
//! fixed tag, regenerates the dataset from the config, and writes CSVs under
//! the output directory. Each CSV row starts with the config hash and the
//! master seed.
//!
//! Layout of the output directory:
//!
//! ```text
//! data/manifest.csv, data/*.tnsr       gen-data
//! models/<role>.ckpt, logs/<role>.csv  train
//! evaluate_<split>.csv, bins/<split>/<method>.csv
//! baselines/<split>/<method>/<index>_{mean,var,mask}.tnsr
//! degrade_sweep.csv
//! data_efficiency.csv
//! ood_scores.csv, ood_roc.csv, ood_summary.csv, ood_family.csv
//! ablate_no_identity.csv
//! recalibrate_<role>.csv
//! ```

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{self, Aggregate, BaselineError, BaselineMethod, CONST_HIGH, CONST_LOW};
use crate::checkpoint::{params_digest, CheckpointError, ModelCheckpoint};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{self, DataError, Dataset, DatasetSpec, Family, Split};
use crate::io::{self, IoError};
use crate::metrics::{self, fmt_f, BinStats, CalibrationReport, MetricError, NllConvention};
use crate::models::{self, EpochLog, LambdaSchedule, ModelError, PredictiveMap, Role, ScratchHead, TrainConfig, VAR_MIN};
use crate::nn::Network;
use crate::ood::{self, Detector, OodError};
use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Ood(#[from] OodError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing artifact {0}; run the producing command first")]
    MissingArtifact(PathBuf),
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

impl ExperimentError {
    /// Process exit code: 2 config, 3 missing artifact, 4 divergence, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Invalid(_) => 2,
            ExperimentError::MissingArtifact(_) => 3,
            ExperimentError::Model(ModelError::Divergence { .. }) => 4,
            ExperimentError::Model(ModelError::Config(_)) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// Roles `train` accepts.
pub const TRAIN_ROLES: [Role; 5] = [Role::Base, Role::Cap, Role::ScratchGauss, Role::ScratchGgd, Role::Autoencoder];

/// A validated config bound to its hash.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    hash: String,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self { cfg, hash })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn out(&self) -> &Path {
        &self.cfg.out
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec { seed: rng::derive_seed(self.cfg.seed, "data"), ..self.cfg.data.clone() }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Ok(Dataset::generate(&self.dataset_spec())?)
    }

    /// Training config of a role with its derived seed.
    pub fn train_config(&self, role: Role) -> TrainConfig {
        let base = match role {
            Role::Base => &self.cfg.base,
            Role::Cap => &self.cfg.cap,
            Role::ScratchGauss | Role::ScratchGgd => &self.cfg.scratch,
            Role::Autoencoder => &self.cfg.autoencoder,
        };
        TrainConfig { seed: rng::derive_seed(self.cfg.seed, &format!("train/{role}")), ..base.clone() }
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.out().join("models").join(format!("{name}.ckpt"))
    }

    pub fn load_model(&self, name: &str) -> Result<Network> {
        let path = self.checkpoint_path(name);
        if !path.is_file() {
            return Err(ExperimentError::MissingArtifact(path));
        }
        Ok(ModelCheckpoint::load(&path)?.network)
    }

    fn write_csv(&self, rel: &str, header: &str, rows: &[String]) -> Result<PathBuf> {
        let path = self.out().join(rel);
        let mut text = format!("config_hash,seed,{header}\n");
        for r in rows {
            text.push_str(&format!("{},{},{r}\n", self.hash, self.cfg.seed));
        }
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }

    fn ssim(&self, a: &[Tensor], b: &[Tensor]) -> Result<f64> {
        Ok(metrics::mean_ssim_with(a, b, self.cfg.ssim_window)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| ExperimentError::Write { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(wrap)?;
    }
    std::fs::write(path, bytes).map_err(wrap)
}

fn unzip(pairs: Vec<(Tensor, Tensor)>) -> (Vec<Tensor>, Vec<Tensor>) {
    pairs.into_iter().unzip()
}

fn base_outputs(base: &Network, xs: &[Tensor]) -> Result<Vec<Tensor>> {
    Ok(xs.par_iter().map(|x| models::base_forward(base, x)).collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Concatenates per-image tensors into one flat tensor.
fn flatten(ts: &[Tensor]) -> Result<Tensor> {
    let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(vec![data.len()], data)?)
}

fn sq_errors(points: &[Tensor], targets: &[Tensor]) -> Vec<f64> {
    points
        .iter()
        .zip(targets)
        .flat_map(|(p, y)| p.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)))
        .collect()
}

fn residuals(points: &[Tensor], targets: &[Tensor]) -> Vec<f64> {
    points.iter().zip(targets).flat_map(|(p, y)| p.data().iter().zip(y.data()).map(|(a, b)| a - b)).collect()
}

/// Epoch log CSV rows.
fn log_rows(log: &[EpochLog]) -> Vec<String> {
    log.iter()
        .map(|l| format!("{},{},{},{},{}", l.epoch, fmt_f(l.lambda), fmt_f(l.loss), fmt_f(l.identity_term), fmt_f(l.nll_term)))
        .collect()
}

const LOG_HEADER: &str = "epoch,lambda,loss,identity_term,nll_term";

/// Caps the global worker pool used for per-sample evaluation. Only the
/// first call has an effect.
pub fn configure_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ExperimentError::Invalid(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------- gen-data

/// Materializes the dataset under `<out>/data` and returns the manifest.
pub fn cmd_gen_data(exp: &Experiment) -> Result<String> {
    let data = exp.dataset()?;
    Ok(io::write_dataset(&exp.out().join("data"), &data)?)
}

// ------------------------------------------------------------------- train

fn train_role(exp: &Experiment, role: Role, data: &Dataset) -> Result<models::Trained> {
    let (xs, ys) = unzip(data.pairs(Split::Train));
    let size = exp.cfg.data.size;
    let cfg = exp.train_config(role);
    Ok(match role {
        Role::Base => models::train_base(&xs, &ys, size, &cfg)?,
        Role::Cap => models::train_cap(&exp.load_model("base")?, &xs, &ys, size, &cfg)?,
        Role::ScratchGauss => models::train_scratch(&xs, &ys, size, &cfg, ScratchHead::Gaussian)?,
        Role::ScratchGgd => models::train_scratch(&xs, &ys, size, &cfg, ScratchHead::Ggd)?,
        Role::Autoencoder => {
            let base = exp.load_model("base")?;
            models::train_autoencoder(&base_outputs(&base, &xs)?, size, &cfg)?
        }
    })
}

fn save_trained(exp: &Experiment, name: &str, trained: &models::Trained) -> Result<PathBuf> {
    let path = exp.checkpoint_path(name);
    write_file(&path, &trained.checkpoint.to_bytes())?;
    exp.write_csv(&format!("logs/{name}.csv"), LOG_HEADER, &log_rows(&trained.log))?;
    Ok(path)
}

/// Trains one role on the train split and writes its checkpoint and log.
/// Cap and autoencoder need the base checkpoint.
pub fn cmd_train(exp: &Experiment, role: Role) -> Result<PathBuf> {
    let data = exp.dataset()?;
    let trained = train_role(exp, role, &data)?;
    save_trained(exp, role.as_str(), &trained)
}

// ---------------------------------------------------------------- evaluate

/// Predictions of one method on a split.
struct MethodOutput {
    name: String,
    points: Vec<Tensor>,
    /// Predictive distributions centred on `points`; `None` for point-only.
    dists: Option<Vec<PredictiveMap>>,
    convention: NllConvention,
}

fn gaussian_dists(points: &[Tensor], vars: &[Tensor]) -> Result<Vec<PredictiveMap>> {
    points
        .iter()
        .zip(vars)
        .map(|(p, v)| Ok(PredictiveMap::gaussian(p.clone(), v.clone())?))
        .collect()
}

/// Uncertainty maps in `dists` re-centred on the base output.
fn centred_on(points: &[Tensor], maps: Vec<PredictiveMap>) -> Vec<PredictiveMap> {
    maps.into_iter().zip(points).map(|(m, p)| PredictiveMap { y_tilde: p.clone(), ..m }).collect()
}

fn report(exp: &Experiment, m: &MethodOutput, targets: &[Tensor]) -> Result<(CalibrationReport, Vec<BinStats>)> {
    let n_pixels: usize = targets.iter().map(Tensor::len).sum();
    let psnr = m.points.iter().zip(targets).map(|(p, y)| metrics::psnr(p, y, 1.0)).sum::<std::result::Result<f64, _>>()?
        / targets.len() as f64;
    let ssim = exp.ssim(&m.points, targets)?;
    let mut r = CalibrationReport {
        method: m.name.clone(),
        psnr,
        ssim,
        uce: f64::NAN,
        c_coeff: f64::NAN,
        ece: f64::NAN,
        sharpness: f64::NAN,
        nll: f64::NAN,
        nll_convention: m.convention,
        n_pixels,
        n_bins: exp.cfg.bins,
        ssim_window: exp.cfg.ssim_window,
    };
    let Some(dists) = &m.dists else {
        return Ok((r, Vec::new()));
    };
    let errs = sq_errors(&m.points, targets);
    let vars: Vec<f64> = dists.iter().flat_map(|d| d.variance.data().iter().copied()).collect();
    let (uce, bins) = metrics::uce(&errs, &vars, exp.cfg.bins)?;
    r.uce = uce;
    r.c_coeff = metrics::pearson_corr(&errs, &vars)?;
    r.sharpness = metrics::sharpness(&vars)?;
    let y = flatten(targets)?;
    let pooled = pool_maps(dists, m.convention)?;
    r.ece = metrics::ece_quantile(&y, &pooled, &metrics::ECE_LEVELS)?;
    r.nll = metrics::nll_eval(&pooled, &y)?;
    Ok((r, bins))
}

/// One flat map over all pixels. Gaussian maps get their variance floored
/// for the likelihood-based metrics.
fn pool_maps(dists: &[PredictiveMap], convention: NllConvention) -> Result<PredictiveMap> {
    let cat = |f: fn(&PredictiveMap) -> &Tensor| flatten(&dists.iter().map(|d| f(d).clone()).collect::<Vec<_>>());
    let mean = cat(|d| &d.y_tilde)?;
    if convention == NllConvention::Gaussian {
        let var = cat(|d| &d.variance)?.map(|v| v.max(VAR_MIN));
        return Ok(PredictiveMap::gaussian(mean, var)?);
    }
    Ok(PredictiveMap::new(mean, cat(|d| &d.alpha)?, cat(|d| &d.beta)?)?)
}

fn method_slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// The baselines evaluated next to the cap, with the const(0.5) reference map.
pub fn eval_baselines() -> Vec<BaselineMethod> {
    let mut v = BaselineMethod::ALL.to_vec();
    v.push(BaselineMethod::Const(0.5));
    v
}

/// Aggregates of a baseline on `xs`; image `i` draws from its own stream.
fn baseline_maps(
    exp: &Experiment,
    method: BaselineMethod,
    base: &Network,
    drop: &Network,
    xs: &[Tensor],
) -> Result<Vec<Aggregate>> {
    let seed = rng::derive_seed(exp.cfg.seed, "evaluate");
    let tag = format!("baseline/{method}");
    Ok(xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = rng::indexed_stream(seed, &tag, i as u64);
            baselines::baseline_aggregate(method, base, drop, x, exp.cfg.passes, &mut r)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

/// `baselines/<split>/<method>/<index>_{mean,var}.tnsr`, plus `_mask.tnsr`
/// (1 where at least one pass covered the pixel) for affine kinds.
fn write_baseline_tensors(exp: &Experiment, split: Split, method: BaselineMethod, indices: &[usize], aggs: &[Aggregate]) -> Result<()> {
    let dir = exp.out().join("baselines").join(split.to_string()).join(method_slug(&method.to_string()));
    std::fs::create_dir_all(&dir).map_err(|source| ExperimentError::Write { path: dir.clone(), source })?;
    let affine = matches!(method, BaselineMethod::TtdaA | BaselineMethod::TtdaPac | BaselineMethod::DoPac);
    for (&i, a) in indices.iter().zip(aggs) {
        io::save_tensor(&dir.join(format!("{i:05}_mean.tnsr")), &a.mean)?;
        io::save_tensor(&dir.join(format!("{i:05}_var.tnsr")), &a.var)?;
        if affine {
            io::save_tensor(&dir.join(format!("{i:05}_mask.tnsr")), &a.count.map(|c| if c > 0.0 { 1.0 } else { 0.0 }))?;
        }
    }
    Ok(())
}

fn cap_maps(cap: &Network, inputs: &[Tensor]) -> Result<Vec<PredictiveMap>> {
    Ok(inputs.par_iter().map(|y| models::cap_forward(cap, y)).collect::<std::result::Result<Vec<_>, _>>()?)
}

fn split_from(data: &Dataset, split: Split) -> (Vec<Tensor>, Vec<Tensor>) {
    unzip(data.pairs(split))
}

/// Evaluates every method on `split`, writing `evaluate_<split>.csv` and the
/// per-bin CSVs.
pub fn cmd_evaluate(exp: &Experiment, split: Split) -> Result<Vec<CalibrationReport>> {
    let base = exp.load_model("base")?;
    let cap = exp.load_model("cap")?;
    let sg = exp.load_model("scratch-gauss")?;
    let sggd = exp.load_model("scratch-ggd")?;
    let digest = params_digest(&base);
    let data = exp.dataset()?;
    let (xs, ys) = split_from(&data, split);
    let y_hats = base_outputs(&base, &xs)?;

    let mut outputs = vec![MethodOutput {
        name: "base".into(),
        points: y_hats.clone(),
        dists: None,
        convention: NllConvention::None,
    }];
    outputs.push(MethodOutput {
        name: "cap".into(),
        points: y_hats.clone(),
        dists: Some(centred_on(&y_hats, cap_maps(&cap, &y_hats)?)),
        convention: NllConvention::Ggd,
    });
    let gauss = xs.iter().map(|x| models::scratch_gauss_forward(&sg, x)).collect::<std::result::Result<Vec<_>, _>>()?;
    let (g_mean, g_var): (Vec<Tensor>, Vec<Tensor>) = gauss.into_iter().unzip();
    outputs.push(MethodOutput {
        name: "scratch-gauss".into(),
        dists: Some(gaussian_dists(&g_mean, &g_var)?),
        points: g_mean,
        convention: NllConvention::Gaussian,
    });
    let ggd = xs.iter().map(|x| models::scratch_ggd_forward(&sggd, x)).collect::<std::result::Result<Vec<_>, _>>()?;
    outputs.push(MethodOutput {
        name: "scratch-ggd".into(),
        points: ggd.iter().map(|m| m.y_tilde.clone()).collect(),
        dists: Some(ggd),
        convention: NllConvention::Ggd,
    });
    let drop = baselines::dropout_model(&base, exp.cfg.dropout_p)?;
    let indices: Vec<usize> = data.split(split).iter().map(|s| s.index).collect();
    for method in eval_baselines() {
        let aggs = baseline_maps(exp, method, &base, &drop, &xs)?;
        write_baseline_tensors(exp, split, method, &indices, &aggs)?;
        let vars: Vec<Tensor> = aggs.into_iter().map(|a| a.var).collect();
        outputs.push(MethodOutput {
            name: method.to_string(),
            dists: Some(gaussian_dists(&y_hats, &vars)?),
            points: y_hats.clone(),
            convention: NllConvention::Gaussian,
        });
    }
    if params_digest(&base) != digest {
        return Err(ModelError::FreezeViolation.into());
    }

    let mut reports = Vec::with_capacity(outputs.len());
    let mut rows = Vec::with_capacity(outputs.len());
    for m in &outputs {
        let (r, bins) = report(exp, m, &ys)?;
        if !bins.is_empty() {
            let path = exp.out().join("bins").join(split.to_string()).join(format!("{}.csv", method_slug(&m.name)));
            write_file(&path, metrics::bins_csv(&bins).as_bytes())?;
        }
        rows.push(format!("{split},{}", r.csv_row()));
        reports.push(r);
    }
    exp.write_csv(&format!("evaluate_{split}.csv"), &format!("split,{}", CalibrationReport::CSV_HEADER), &rows)?;
    Ok(reports)
}

// ----------------------------------------------------------- degrade sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kappa: f64,
    /// SSIM of the cap reconstruction from the noisy input against clean ŷ.
    pub ssim_identity: f64,
    pub uce_cap: f64,
    pub uce_ttda_pac: f64,
    pub uce_const_low: f64,
    pub uce_const_high: f64,
}

/// Feeds ŷ + κ·z (z standard normal, fixed per image across κ) to the cap on
/// the test split. The degraded prediction ŷ + κ·z is what every method's
/// uncertainty is scored against.
pub fn cmd_degrade_sweep(exp: &Experiment) -> Result<Vec<SweepRow>> {
    let base = exp.load_model("base")?;
    let cap = exp.load_model("cap")?;
    let data = exp.dataset()?;
    let (xs, ys) = split_from(&data, Split::Test);
    let y_hats = base_outputs(&base, &xs)?;
    let noise_seed = rng::derive_seed(exp.cfg.seed, "degrade-sweep");
    let z: Vec<Tensor> = y_hats
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let mut r = rng::indexed_stream(noise_seed, "noise", i as u64);
            let draws: Vec<f64> = (0..y.len()).map(|_| StandardNormal.sample(&mut r)).collect();
            Tensor::new(y.shape().to_vec(), draws)
        })
        .collect::<std::result::Result<_, _>>()?;
    let drop = baselines::dropout_model(&base, exp.cfg.dropout_p)?;
    let pac_maps: Vec<Tensor> = baseline_maps(exp, BaselineMethod::TtdaPac, &base, &drop, &xs)?.into_iter().map(|a| a.var).collect();
    let pac = flatten(&pac_maps)?.into_data();
    let n: usize = ys.iter().map(Tensor::len).sum();
    let bins = exp.cfg.bins;

    let mut rows = Vec::new();
    for &kappa in &exp.cfg.kappas {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(ExperimentError::Invalid(format!("kappa {kappa} must be non-negative")));
        }
        let noisy: Vec<Tensor> =
            y_hats.iter().zip(&z).map(|(y, z)| y.zip_map(z, |a, b| a + kappa * b)).collect::<std::result::Result<_, _>>()?;
        let maps = cap_maps(&cap, &noisy)?;
        let recon: Vec<Tensor> = maps.iter().map(|m| m.y_tilde.clone()).collect();
        let errs = sq_errors(&noisy, &ys);
        let cap_var: Vec<f64> = maps.iter().flat_map(|m| m.variance.data().iter().copied()).collect();
        rows.push(SweepRow {
            kappa,
            ssim_identity: exp.ssim(&recon, &y_hats)?,
            uce_cap: metrics::uce(&errs, &cap_var, bins)?.0,
            uce_ttda_pac: metrics::uce(&errs, &pac, bins)?.0,
            uce_const_low: metrics::uce(&errs, &vec![CONST_LOW; n], bins)?.0,
            uce_const_high: metrics::uce(&errs, &vec![CONST_HIGH; n], bins)?.0,
        });
    }
    let csv: Vec<String> = rows
        .iter()
        .map(|r| {
            [r.kappa, r.ssim_identity, r.uce_cap, r.uce_ttda_pac, r.uce_const_low, r.uce_const_high]
                .map(fmt_f)
                .join(",")
        })
        .collect();
    let header = format!("kappa,ssim_identity,uce_cap,uce_ttda-pac,uce_const({CONST_LOW}),uce_const({CONST_HIGH})");
    exp.write_csv("degrade_sweep.csv", &header, &csv)?;
    Ok(rows)
}

// --------------------------------------------------------- data efficiency

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyRow {
    pub fraction: f64,
    pub n_train: usize,
    /// "cap" or "scratch-ggd".
    pub model: String,
    /// SSIM(ỹ, y) on the test split.
    pub ssim: f64,
    pub uce: f64,
    /// First epoch whose loss is within 5% of the loss drop from its minimum.
    pub plateau_epoch: usize,
}

/// First epoch e with loss_e − min ≤ 0.05·(loss_0 − min).
pub fn plateau_epoch(log: &[EpochLog]) -> usize {
    let Some(first) = log.first() else { return 0 };
    let min = log.iter().map(|l| l.loss).fold(f64::INFINITY, f64::min);
    let tol = 0.05 * (first.loss - min);
    log.iter().position(|l| l.loss - min <= tol).unwrap_or(0)
}

/// Number of training samples used for `fraction`.
pub fn fraction_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).clamp(1, n)
}

/// Retrains the cap (over the frozen base) and the GGD scratch model on the
/// leading `fraction` of the train split, with the seeds `train` uses.
pub fn cmd_data_efficiency(exp: &Experiment) -> Result<Vec<EfficiencyRow>> {
    let base = exp.load_model("base")?;
    let data = exp.dataset()?;
    let (xs, ys) = split_from(&data, Split::Train);
    let (tx, ty) = split_from(&data, Split::Test);
    let size = exp.cfg.data.size;
    let train_hats = base_outputs(&base, &xs)?;
    let test_hats = base_outputs(&base, &tx)?;
    let test_errs = sq_errors(&test_hats, &ty);
    let mut rows = Vec::new();
    for &f in &exp.cfg.fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(ExperimentError::Invalid(format!("fraction {f} outside (0,1]")));
        }
        let k = fraction_count(xs.len(), f);
        let cap = models::train_cap_on_outputs(&train_hats[..k], &ys[..k], size, &exp.train_config(Role::Cap))?;
        let maps = cap_maps(cap.network(), &test_hats)?;
        let recon: Vec<Tensor> = maps.iter().map(|m| m.y_tilde.clone()).collect();
        let var: Vec<f64> = maps.iter().flat_map(|m| m.variance.data().iter().copied()).collect();
        rows.push(EfficiencyRow {
            fraction: f,
            n_train: k,
            model: "cap".into(),
            ssim: exp.ssim(&recon, &ty)?,
            uce: metrics::uce(&test_errs, &var, exp.cfg.bins)?.0,
            plateau_epoch: plateau_epoch(&cap.log),
        });

        let cfg = exp.train_config(Role::ScratchGgd);
        let sc = models::train_scratch(&xs[..k], &ys[..k], size, &cfg, ScratchHead::Ggd)?;
        let maps = tx.iter().map(|x| models::scratch_ggd_forward(sc.network(), x)).collect::<std::result::Result<Vec<_>, _>>()?;
        let recon: Vec<Tensor> = maps.iter().map(|m| m.y_tilde.clone()).collect();
        let var: Vec<f64> = maps.iter().flat_map(|m| m.variance.data().iter().copied()).collect();
        rows.push(EfficiencyRow {
            fraction: f,
            n_train: k,
            model: "scratch-ggd".into(),
            ssim: exp.ssim(&recon, &ty)?,
            uce: metrics::uce(&sq_errors(&recon, &ty), &var, exp.cfg.bins)?.0,
            plateau_epoch: plateau_epoch(&sc.log),
        });
    }
    let csv: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{},{},{},{}", fmt_f(r.fraction), r.n_train, r.model, fmt_f(r.ssim), fmt_f(r.uce), r.plateau_epoch))
        .collect();
    exp.write_csv("data_efficiency.csv", "fraction,n_train,model,ssim,uce,plateau_epoch", &csv)?;
    Ok(rows)
}

// --------------------------------------------------------------------- ood

#[derive(Debug, Clone, PartialEq)]
pub struct AurocRow {
    pub detector: Detector,
    /// "A-vs-BC", "A-vs-B" or "A-vs-C".
    pub pairing: String,
    pub auroc: f64,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyStats {
    pub family: Family,
    pub mean_uncertainty: f64,
    pub ae_recon_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodReport {
    pub scores: Vec<ood::OodScore>,
    pub aurocs: Vec<AurocRow>,
    pub families: Vec<FamilyStats>,
}

impl OodReport {
    pub fn auroc(&self, detector: Detector, pairing: &str) -> Option<f64> {
        self.aurocs.iter().find(|r| r.detector == detector && r.pairing == pairing).map(|r| r.auroc)
    }

    pub fn family(&self, family: Family) -> Option<&FamilyStats> {
        self.families.iter().find(|f| f.family == family)
    }
}

/// Degraded inputs of `count` fresh images per family.
pub fn ood_inputs(exp: &Experiment, family: Family) -> Result<Vec<Tensor>> {
    let seed = rng::derive_seed(exp.cfg.seed, "ood");
    (0..exp.cfg.ood_count)
        .map(|i| {
            let y = data::gen_family(family, exp.cfg.data.size, seed, i);
            let mut r = rng::indexed_stream(seed, &format!("degrade/{family}"), i as u64);
            Ok(data::degrade(&y, &exp.cfg.data.degradation, &mut r)?)
        })
        .collect()
}

/// Scores fresh images of every family with all three detectors. Family A
/// is in-distribution; reference means come from the validation split.
pub fn cmd_ood(exp: &Experiment) -> Result<OodReport> {
    let base = exp.load_model("base")?;
    let cap = exp.load_model("cap")?;
    let ae = exp.load_model("autoencoder")?;
    let data = exp.dataset()?;
    let (val, _) = split_from(&data, Split::Val);
    let feat_mean = ood::feature_mean(&base, models::BASE_FEATURE_TAG, &val)?;
    let ae_mean = ood::ae_feature_mean(&base, &ae, &val)?;

    let mut scores = Vec::new();
    let mut families = Vec::new();
    for family in Family::ALL {
        let xs = ood_inputs(exp, family)?;
        let label = family != Family::A;
        let per: Vec<[f64; 4]> = xs
            .par_iter()
            .map(|x| -> std::result::Result<[f64; 4], OodError> {
                Ok([
                    ood::feature_distance_score(&base, models::BASE_FEATURE_TAG, &feat_mean, x)?,
                    ood::ae_feature_detector(&base, &ae, &ae_mean, x)?,
                    ood::mean_uncertainty_score(&base, &cap, x)?,
                    ood::ae_reconstruction_mse(&base, &ae, x)?,
                ])
            })
            .collect::<std::result::Result<_, _>>()?;
        for (i, s) in per.iter().enumerate() {
            for (k, detector) in Detector::ALL.into_iter().enumerate() {
                scores.push(ood::OodScore { id: format!("{family}-{i:04}"), detector, score: s[k], label });
            }
        }
        let n = per.len() as f64;
        families.push(FamilyStats {
            family,
            mean_uncertainty: per.iter().map(|s| s[2]).sum::<f64>() / n,
            ae_recon_mse: per.iter().map(|s| s[3]).sum::<f64>() / n,
        });
    }

    let mut aurocs = Vec::new();
    for detector in Detector::ALL {
        for (pairing, outs) in [("A-vs-BC", &[Family::B, Family::C][..]), ("A-vs-B", &[Family::B][..]), ("A-vs-C", &[Family::C][..])] {
            let (s, l): (Vec<f64>, Vec<bool>) = scores
                .iter()
                .filter(|o| o.detector == detector)
                .filter(|o| o.id.starts_with("A-") || outs.iter().any(|f| o.id.starts_with(&format!("{f}-"))))
                .map(|o| (o.score, o.label))
                .unzip();
            let (curve, auroc) = ood::roc_auroc(&s, &l)?;
            aurocs.push(AurocRow { detector, pairing: pairing.into(), auroc, curve });
        }
    }

    let score_rows: Vec<String> =
        scores.iter().map(|s| format!("{},{},{},{}", s.id, s.detector, fmt_f(s.score), if s.label { "out" } else { "in" })).collect();
    exp.write_csv("ood_scores.csv", "id,detector,score,label", &score_rows)?;
    let roc_rows: Vec<String> = aurocs
        .iter()
        .flat_map(|r| r.curve.iter().map(move |(f, t)| format!("{},{},{},{}", r.detector, r.pairing, fmt_f(*f), fmt_f(*t))))
        .collect();
    exp.write_csv("ood_roc.csv", "detector,pairing,fpr,tpr", &roc_rows)?;
    let summary: Vec<String> = aurocs.iter().map(|r| format!("{},{},{}", r.detector, r.pairing, fmt_f(r.auroc))).collect();
    exp.write_csv("ood_summary.csv", "detector,pairing,auroc", &summary)?;
    let fam_rows: Vec<String> = families
        .iter()
        .map(|f| format!("{},{},{}", f.family, fmt_f(f.mean_uncertainty), fmt_f(f.ae_recon_mse)))
        .collect();
    exp.write_csv("ood_family.csv", "family,mean_uncertainty,ae_recon_mse", &fam_rows)?;
    Ok(OodReport { scores, aurocs, families })
}

// ------------------------------------------------------------ ablation

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub full: CalibrationReport,
    pub no_identity: CalibrationReport,
    pub no_identity_log: Vec<EpochLog>,
}

/// Trains a cap with λ ≡ 0 (same seed as the full cap) and reports both caps
/// on the test split.
pub fn cmd_ablate_no_identity(exp: &Experiment) -> Result<AblationReport> {
    let base = exp.load_model("base")?;
    let cap = exp.load_model("cap")?;
    let data = exp.dataset()?;
    let (xs, ys) = split_from(&data, Split::Train);
    let cfg = TrainConfig { lambda: LambdaSchedule::Constant(0.0), ..exp.train_config(Role::Cap) };
    let trained = models::train_cap(&base, &xs, &ys, exp.cfg.data.size, &cfg)?;
    save_trained(exp, "cap-no-identity", &trained)?;

    let (tx, ty) = split_from(&data, Split::Test);
    let y_hats = base_outputs(&base, &tx)?;
    let rep = |name: &str, net: &Network| -> Result<CalibrationReport> {
        let m = MethodOutput {
            name: name.into(),
            points: y_hats.clone(),
            dists: Some(centred_on(&y_hats, cap_maps(net, &y_hats)?)),
            convention: NllConvention::Ggd,
        };
        Ok(report(exp, &m, &ty)?.0)
    };
    let full = rep("cap", &cap)?;
    let no_identity = rep("cap-no-identity", trained.network())?;
    let rows = vec![format!("test,{}", full.csv_row()), format!("test,{}", no_identity.csv_row())];
    exp.write_csv("ablate_no_identity.csv", &format!("split,{}", CalibrationReport::CSV_HEADER), &rows)?;
    Ok(AblationReport { full, no_identity, no_identity_log: trained.log })
}

// ----------------------------------------------------------- recalibrate

#[derive(Debug, Clone, PartialEq)]
pub struct RecalReport {
    pub model: Role,
    pub split: Split,
    pub s_star: f64,
    pub uce_pre: f64,
    pub uce_post: f64,
    pub c_coeff: f64,
    pub sharpness_pre: f64,
    pub sharpness_post: f64,
}

/// Point estimates and variance maps of a variance-producing model.
fn point_and_variance(exp: &Experiment, role: Role, xs: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    match role {
        Role::ScratchGauss => {
            let net = exp.load_model(role.as_str())?;
            Ok(xs.iter().map(|x| models::scratch_gauss_forward(&net, x)).collect::<std::result::Result<Vec<_>, _>>()?.into_iter().unzip())
        }
        Role::ScratchGgd => {
            let net = exp.load_model(role.as_str())?;
            let maps = xs.iter().map(|x| models::scratch_ggd_forward(&net, x)).collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(maps.into_iter().map(|m| (m.y_tilde, m.variance)).unzip())
        }
        Role::Cap => {
            let base = exp.load_model("base")?;
            let cap = exp.load_model("cap")?;
            let y_hats = base_outputs(&base, xs)?;
            let vars = cap_maps(&cap, &y_hats)?.into_iter().map(|m| m.variance).collect();
            Ok((y_hats, vars))
        }
        other => Err(ExperimentError::Invalid(format!("`{other}` produces no variance map"))),
    }
}

/// Fits s* on the validation split and reports UCE before and after
/// scaling the variances by s*² on `split`.
pub fn cmd_recalibrate(exp: &Experiment, role: Role, split: Split) -> Result<RecalReport> {
    let data = exp.dataset()?;
    let (vx, vy) = split_from(&data, Split::Val);
    let (vp, vv) = point_and_variance(exp, role, &vx)?;
    let v_var: Vec<f64> = flatten(&vv)?.into_data().into_iter().map(|v| v.max(VAR_MIN)).collect();
    let s_star = metrics::variance_scaling_fit(&residuals(&vp, &vy), &v_var)?;

    let (tx, ty) = split_from(&data, split);
    let (tp, tv) = point_and_variance(exp, role, &tx)?;
    let errs = sq_errors(&tp, &ty);
    let pre = flatten(&tv)?.into_data();
    let post: Vec<f64> = pre.iter().map(|v| v * s_star * s_star).collect();
    let rep = RecalReport {
        model: role,
        split,
        s_star,
        uce_pre: metrics::uce(&errs, &pre, exp.cfg.bins)?.0,
        uce_post: metrics::uce(&errs, &post, exp.cfg.bins)?.0,
        c_coeff: metrics::pearson_corr(&errs, &pre)?,
        sharpness_pre: metrics::sharpness(&pre)?,
        sharpness_post: metrics::sharpness(&post)?,
    };
    let row = format!(
        "{},{},{},{},{},{},{},{}",
        role,
        split,
        fmt_f(rep.s_star),
        fmt_f(rep.uce_pre),
        fmt_f(rep.uce_post),
        fmt_f(rep.c_coeff),
        fmt_f(rep.sharpness_pre),
        fmt_f(rep.sharpness_post)
    );
    exp.write_csv(
        &format!("recalibrate_{role}.csv"),
        "model,split,s_star,uce_pre,uce_post,c_coeff,sharpness_pre,sharpness_post",
        &[row],
    )?;
    Ok(rep)
}
