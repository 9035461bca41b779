use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use miaa_cli::pipeline::{self, Layout};
use miaa_cli::{ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "miaa",
    version,
    about = "Integrated ad auction experiments on a synthetic feed market"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Experiment config (TOML). Defaults to the run directory's config.toml, then built-ins.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// GMV weight in Rev + alpha * Gmv.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Offer the ad-free list as a candidate allocation.
    #[arg(long, global = true)]
    allow_no_ad: bool,
    #[arg(long, global = true)]
    clamp_payment_at_zero: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the market and write all data splits.
    Generate(Common),
    /// Train the list-wise click model and the point-wise baseline.
    TrainEpm(Common),
    /// Train the mechanism networks on frozen click-model predictions.
    TrainMechanism(Common),
    /// Evaluate every mechanism on the test split.
    Evaluate(Common),
    /// Incentive-compatibility and individual-rationality audits.
    Audit(Common),
    /// Replay test requests through the serving path and report latency.
    ServeSim(Common),
    /// Mean and standard deviation of evaluation metrics across run directories.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where compare.csv is written.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let out = common.out.clone().unwrap_or_else(|| ExperimentConfig::default().out);
            let stored = Layout::new(out).config();
            if stored.exists() {
                ExperimentConfig::load(&stored)?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    base.resolve(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
        alpha: common.alpha,
        allow_no_ad: common.allow_no_ad,
        clamp_payment_at_zero: common.clamp_payment_at_zero,
    })
    .context("invalid configuration")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load(&c)?;
            pipeline::generate(&cfg)?;
            println!("wrote data to {}", cfg.out.display());
        }
        Command::TrainEpm(c) => {
            let cfg = load(&c)?;
            for s in pipeline::train_epm(&cfg)? {
                println!(
                    "{:<10} auc {} pcoc {} best epoch {}",
                    s.model,
                    opt(s.auc),
                    opt(s.pcoc),
                    s.best_epoch
                );
            }
        }
        Command::TrainMechanism(c) => {
            let cfg = load(&c)?;
            pipeline::train_mechanism(&cfg)?;
            println!("wrote {}", Layout::new(&cfg.out).checkpoint("mechanism").display());
        }
        Command::Evaluate(c) => {
            let cfg = load(&c)?;
            for r in pipeline::evaluate(&cfg)? {
                println!(
                    "{:<16} {:<9} seed {:<3} objective {:.4} rpm {:.1} gpm {:.1} auc {} pcoc {}",
                    r.mechanism,
                    r.mode,
                    r.seed,
                    r.objective,
                    r.rpm,
                    r.gpm,
                    opt(r.auc),
                    opt(r.pcoc)
                );
            }
        }
        Command::Audit(c) => {
            let cfg = load(&c)?;
            for a in pipeline::audit(&cfg)? {
                println!(
                    "{:<16} max regret {:.3e} mean regret {:.3e} IR violations {}",
                    a.mechanism, a.ic_max_regret, a.ic_mean_regret, a.ir_violations
                );
            }
        }
        Command::ServeSim(c) => {
            let cfg = load(&c)?;
            let (outcomes, lat) = pipeline::serve_sim(&cfg)?;
            let shown = outcomes.iter().filter(|o| o.winner.is_some()).count();
            println!(
                "served {} requests ({shown} with an ad): mean {:.1} us, p50 {:.1} us, p99 {:.1} us",
                lat.requests, lat.mean_us, lat.p50_us, lat.p99_us
            );
        }
        Command::Compare { runs, out } => {
            for r in pipeline::compare(&runs, &out)? {
                println!(
                    "{:<16} {:<22} {:.4} ± {:.4} ({} runs)",
                    r.mechanism, r.metric, r.mean, r.std, r.seeds
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
