//! `idcap` command-line driver.
//!
//! Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numerical
//! divergence, 1 anything else. `IDCAP_THREADS` caps evaluation workers.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idcap::config::ExperimentConfig;
use idcap::data::Split;
use idcap::experiments::{self as ex, Experiment, ExperimentError};
use idcap::metrics::fmt_f;
use idcap::models::Role;

#[derive(Parser)]
#[command(name = "idcap", version, about = "Post-hoc identity cap: training, evaluation and sweeps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file (key = value with [section] headers). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the dataset and its manifest under <out>/data.
    GenData(Common),
    /// Train one model role.
    Train {
        /// base, cap, scratch-gauss, scratch-ggd or autoencoder.
        #[arg(long)]
        role: Role,
        #[command(flatten)]
        common: Common,
    },
    /// Calibration report for every method on one split.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Identity-degradation sweep over the configured kappas.
    DegradeSweep(Common),
    /// Retrain cap and GGD scratch model on fractions of the train split.
    DataEfficiency(Common),
    /// Out-of-distribution scores, ROC curves and AUROC.
    Ood(Common),
    /// Cap trained without the identity term.
    AblateNoIdentity(Common),
    /// Variance scaling fitted on the validation split.
    Recalibrate {
        #[arg(long, default_value = "scratch-gauss")]
        model: Role,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
}

fn experiment(c: &Common) -> Result<Experiment, ExperimentError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    Experiment::new(cfg)
}

fn threads() -> Result<(), ExperimentError> {
    match std::env::var("IDCAP_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| ExperimentError::Invalid(format!("IDCAP_THREADS=`{v}` is not a positive integer")))?;
            ex::configure_threads(n)
        }
        Err(_) => Ok(()),
    }
}

fn run(cmd: Cmd) -> Result<(), ExperimentError> {
    threads()?;
    match cmd {
        Cmd::GenData(c) => {
            let exp = experiment(&c)?;
            let manifest = ex::cmd_gen_data(&exp)?;
            println!("wrote {} samples to {}", manifest.lines().count() - 1, exp.out().join("data").display());
        }
        Cmd::Train { role, common } => {
            let exp = experiment(&common)?;
            let path = ex::cmd_train(&exp, role)?;
            println!("{role}: {}", path.display());
        }
        Cmd::Evaluate { split, common } => {
            let exp = experiment(&common)?;
            for r in ex::cmd_evaluate(&exp, split)? {
                println!(
                    "{:<14} psnr {:>8} ssim {:>8} uce {:>10} c_coeff {:>8}",
                    r.method,
                    format!("{:.3}", r.psnr),
                    format!("{:.4}", r.ssim),
                    format!("{:.3e}", r.uce),
                    format!("{:.3}", r.c_coeff)
                );
            }
        }
        Cmd::DegradeSweep(c) => {
            let exp = experiment(&c)?;
            for r in ex::cmd_degrade_sweep(&exp)? {
                println!(
                    "kappa {:<6} ssim {:.4} uce cap {:.3e} ttda-pac {:.3e} const-low {:.3e} const-high {:.3e}",
                    r.kappa, r.ssim_identity, r.uce_cap, r.uce_ttda_pac, r.uce_const_low, r.uce_const_high
                );
            }
        }
        Cmd::DataEfficiency(c) => {
            let exp = experiment(&c)?;
            for r in ex::cmd_data_efficiency(&exp)? {
                println!(
                    "fraction {:<5} {:<12} n {:>4} ssim {:.4} uce {:.3e} plateau {}",
                    r.fraction, r.model, r.n_train, r.ssim, r.uce, r.plateau_epoch
                );
            }
        }
        Cmd::Ood(c) => {
            let exp = experiment(&c)?;
            let rep = ex::cmd_ood(&exp)?;
            for f in &rep.families {
                println!("family {} mean uncertainty {:.4e}", f.family, f.mean_uncertainty);
            }
            for r in &rep.aurocs {
                println!("{:<17} {:<8} auroc {}", r.detector.to_string(), r.pairing, fmt_f(r.auroc));
            }
        }
        Cmd::AblateNoIdentity(c) => {
            let exp = experiment(&c)?;
            let rep = ex::cmd_ablate_no_identity(&exp)?;
            for r in [&rep.full, &rep.no_identity] {
                println!("{:<16} uce {:.3e} c_coeff {:.3}", r.method, r.uce, r.c_coeff);
            }
        }
        Cmd::Recalibrate { model, split, common } => {
            let exp = experiment(&common)?;
            let r = ex::cmd_recalibrate(&exp, model, split)?;
            println!("{model} on {split}: s* {:.4} uce {:.3e} -> {:.3e}", r.s_star, r.uce_pre, r.uce_post);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
