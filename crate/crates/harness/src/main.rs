use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use msl_core::ats::{RootBranch, TauBounds};
use msl_core::catalog::Split;
use msl_harness::commands::{self, DEFAULT_TAU_GRID};
use msl_harness::config::{LossKind, RunConfig, TemperatureMode};
use msl_harness::HarnessError;

#[derive(Parser)]
#[command(name = "msl", version, about = "Masked softmax loss experiments on synthetic catalogs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generated vocabulary, catalog and interactions.
    GenData(Common),
    /// Build the item trie and write its edge dump and statistics.
    BuildTrie(Common),
    /// Train, select by validation NDCG@5, report test metrics.
    Train(Common),
    /// Evaluate a checkpoint with constrained beam search.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// LML training with per-step gradient norms of both loss terms.
    DiagGradnorms(Common),
    /// Positive-vs-negative loss term when optimizing LML vs. optimizing it directly.
    DiagL2curves(Common),
    /// Per-token weight distribution of one batch.
    DiagWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Gaussian fit of valid-token logits of one batch.
    DiagGaussfit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 30)]
        bins: usize,
    },
    /// MSL over a fixed temperature grid plus adaptive temperature.
    SweepTemp {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Trie build time and size over catalog sizes.
    BenchTrie {
        #[arg(long, value_delimiter = ',', default_value = "0,100,1000,10000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        outdir: Option<PathBuf>,
    },
    /// Variant matrix over several seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
}

/// Shared options. Flags override values from `--config`.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, value_enum)]
    loss: Option<LossKind>,
    /// Fixed temperature.
    #[arg(long, conflicts_with = "ats")]
    tau: Option<f64>,
    /// Adaptive temperature.
    #[arg(long)]
    ats: bool,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    tau_min: Option<f64>,
    #[arg(long)]
    tau_max: Option<f64>,
    #[arg(long)]
    plus_root: bool,
    /// Scale negatives by |Z| / |Z_valid|.
    #[arg(long)]
    alpha: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    users: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.outdir {
            c.outdir = v.clone();
        }
        if let Some(v) = &self.run_id {
            c.run_id = v.clone();
        }
        if let Some(v) = self.loss {
            c.loss = v;
        }
        if let Some(tau) = self.tau {
            c.temperature = TemperatureMode::Fixed { tau };
        }
        let ats_flags = self.eta.is_some()
            || self.smoothing.is_some()
            || self.tau_min.is_some()
            || self.tau_max.is_some()
            || self.plus_root;
        if self.ats || ats_flags {
            let (mut eta, mut smoothing, mut bounds, mut branch) = match c.temperature {
                TemperatureMode::Ats { eta, smoothing, bounds, branch } => (eta, smoothing, bounds, branch),
                TemperatureMode::Fixed { .. } if self.ats => (0.25, 0.1, TauBounds::default(), RootBranch::Minus),
                TemperatureMode::Fixed { .. } => {
                    return Err(HarnessError::Config("adaptive-temperature options need --ats".into()));
                }
            };
            eta = self.eta.unwrap_or(eta);
            smoothing = self.smoothing.unwrap_or(smoothing);
            bounds = TauBounds::new(self.tau_min.unwrap_or(bounds.min), self.tau_max.unwrap_or(bounds.max))?;
            if self.plus_root {
                branch = RootBranch::Plus;
            }
            c.temperature = TemperatureMode::Ats { eta, smoothing, bounds, branch };
        }
        if self.alpha {
            c.vocab_ratio_alpha = true;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.beam_size {
            c.beam_size = v;
        }
        if let Some(v) = self.lr {
            c.model.lr = v;
        }
        if let Some(v) = self.d {
            c.model.d = v;
        }
        if let Some(v) = self.users {
            c.data.interactions.n_users = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), HarnessError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::GenData(c) => {
            let cfg = c.resolve()?;
            let data = commands::gen_data(&cfg)?;
            println!(
                "{} items, {} tokens, {} users -> {}",
                data.catalog.len(),
                data.vocab_size(),
                data.interactions.records.len(),
                cfg.run_dir().display()
            );
        }
        Command::BuildTrie(c) => print_json(&commands::build_trie(&c.resolve()?)?)?,
        Command::Train(c) => print_json(&commands::train(&c.resolve()?)?.report)?,
        Command::Eval { common, checkpoint, split } => {
            let split = match split {
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let r = commands::eval(&common.resolve()?, &checkpoint, split)?;
            print_json(&serde_json::json!({ "ks": r.ks, "ndcg": r.ndcg, "hr": r.hr }))?;
        }
        Command::DiagGradnorms(c) => {
            let r = commands::diag_gradnorms(&c.resolve()?)?;
            print_json(&serde_json::json!({
                "steps": r.steps.len(),
                "l1_dominance_after_epoch1": r.dominance_after_epoch1,
                "max_additivity_err": r.max_additivity_err,
            }))?;
        }
        Command::DiagL2curves(c) => {
            let r = commands::diag_l2curves(&c.resolve()?)?;
            print_json(&serde_json::json!({
                "final_l2_under_lml": r.final_l2_under_lml,
                "final_l2_under_l2": r.final_l2_under_l2,
            }))?;
        }
        Command::DiagWeights { common, checkpoint } => {
            let r = commands::diag_weights(&common.resolve()?, &checkpoint)?;
            print_json(&serde_json::json!({
                "tokens": r.rows.len(),
                "low_weight_count": r.low_weight_count,
                "low_weight_early_fraction": r.low_weight_early_fraction,
            }))?;
        }
        Command::DiagGaussfit { common, checkpoint, bins } => {
            let f = commands::diag_gaussfit(&common.resolve()?, &checkpoint, bins)?;
            print_json(&serde_json::json!({
                "n": f.n, "mu": f.mu, "sigma2": f.sigma2,
                "skewness": f.skewness, "excess_kurtosis": f.excess_kurtosis,
            }))?;
        }
        Command::SweepTemp { common, taus } => {
            let grid = taus.unwrap_or_else(|| DEFAULT_TAU_GRID.to_vec());
            print_json(&commands::sweep_temperature(&common.resolve()?, &grid)?)?;
        }
        Command::BenchTrie { sizes, seed, outdir } => {
            print_json(&commands::bench_trie(seed, &sizes, outdir.as_deref())?)?;
        }
        Command::Compare { common, seeds, taus } => {
            let grid = taus.unwrap_or_else(|| DEFAULT_TAU_GRID.to_vec());
            let cmp = commands::compare(&common.resolve()?, seeds, &grid)?;
            for v in &cmp.variants {
                println!("{:<18} {:.4} +- {:.4}", v.label, v.mean_test_ndcg10, v.std_test_ndcg10);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
