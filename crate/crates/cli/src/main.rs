//! `pvnet`: train, evaluate, and probe the point+view shape recognizer.
//!
//! Exit codes: 0 success, 2 for configuration and input validation
//! errors, 1 for everything else (IO, divergence, per-shape prep
//! failures).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pvnet_core::config::RunConfig;
use pvnet_core::runner;
use pvnet_core::Error;

#[derive(Parser)]
#[command(name = "pvnet", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic four-class benchmark corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Training shapes per class.
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        /// Test shapes per class.
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
    },
    /// Sample point clouds and render views into the cache directory.
    Prep {
        #[command(flatten)]
        common: Common,
    },
    /// Train from scratch or resume from `--checkpoint`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Classification metrics of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Retrieval features, mean average precision, and PR curve.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score every ablation arm under one config.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy of a checkpoint under reduced test-time point and view
    /// budgets.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference verification of every differentiable op and of
    /// the composed model.
    Gradcheck {
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write the learned per-point attention masks of the test split.
    DumpMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::from_path(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("PVNET_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .map_err(|_| Error::config(format!("PVNET_THREADS must be a thread count, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    init_threads()?;
    match cli.command {
        Command::Synth { common, train_per_class, test_per_class } => {
            let cfg = common.load()?;
            let manifest = runner::cmd_synth(&cfg, &common.out, train_per_class, test_per_class)?;
            println!("manifest {}", manifest.display());
        }
        Command::Prep { common } => {
            let cfg = common.load()?;
            let report = runner::cmd_prep(&cfg, &common.out)?;
            println!(
                "prepped {} skipped {} failed {}",
                report.prepped,
                report.skipped,
                report.failures.len()
            );
            if !report.failures.is_empty() {
                eprintln!(
                    "error: {} shapes failed to prep; see {}",
                    report.failures.len(),
                    common.out.join("prep.report.json").display()
                );
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Train { common, checkpoint } => {
            let cfg = common.load()?;
            let artifacts = runner::cmd_train(&cfg, &common.out, checkpoint.as_deref())?;
            println!("checkpoint {}", artifacts.last.display());
            println!("best       {}", artifacts.best.display());
            println!("metrics    {}", artifacts.metrics.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let summary = runner::cmd_eval(&cfg, &checkpoint, &common.out)?;
            println!(
                "overall {:.6} mean_class {:.6} over {} shapes",
                summary.overall, summary.mean_class, summary.n_shapes
            );
        }
        Command::Retrieve { common, checkpoint } => {
            let cfg = common.load()?;
            let summary = runner::cmd_retrieve(&cfg, &checkpoint, &common.out)?;
            println!("map {:.6} over {} queries", summary.map, summary.n_queries);
        }
        Command::Ablate { common } => {
            let cfg = common.load()?;
            let scores = runner::cmd_ablate(&cfg, &common.out)?;
            for s in &scores {
                println!("{:<12} overall {:.4} mean_class {:.4}", s.arm, s.overall, s.mean_class);
            }
        }
        Command::Sweep { common, checkpoint } => {
            let cfg = common.load()?;
            let rows = runner::cmd_sweep(&cfg, &checkpoint, &common.out)?;
            for r in &rows {
                println!("{:<12} overall {:.4} mean_class {:.4}", r.level, r.overall, r.mean_class);
            }
        }
        Command::Gradcheck { out } => {
            let rows = runner::cmd_gradcheck(&out)?;
            let mut failed = 0usize;
            for r in &rows {
                let tag = if r.pass { "ok  " } else { "FAIL" };
                println!("{tag} {:<24} max rel err {:.3e}", r.name, r.max_rel_err);
                failed += usize::from(!r.pass);
            }
            if failed > 0 {
                eprintln!("error: {failed} gradient checks failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DumpMasks { common, checkpoint } => {
            let cfg = common.load()?;
            let count = runner::cmd_dump_masks(&cfg, &checkpoint, &common.out)?;
            println!("wrote {count} mask tensors under {}", common.out.join("masks").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
