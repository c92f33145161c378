use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stageprune::cli::{self, exit_code, DENSE_CHECKPOINT, MOSAIC_DIR};
use stageprune::config::RunConfig;
use stageprune::Error;

/// Stage-wise structured pruning for diffusion denoisers.
///
/// Any configuration key can be overridden after the subcommand as
/// `--key value`, e.g. `stageprune analyze --lambda 0 --M 0.7`.
#[derive(Parser)]
#[command(name = "stageprune", version)]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for stage pruning and evaluation
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// `--key value` configuration overrides
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write score curves and the stage plan
    Analyze(Overrides),
    /// Train the toy denoiser
    Train(Overrides),
    /// Build per-stage sub-networks from a dense checkpoint
    Prune {
        /// Dense checkpoint (default: <out-dir>/dense.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use this plan file instead of deriving one
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Draw samples from the dense model or a mosaic
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Mosaic directory written by `prune`
        #[arg(long)]
        mosaic: Option<PathBuf>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Compare a mosaic (or the dense model itself) against the dense model
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mosaic: Option<PathBuf>,
        /// Add a baseline row; only `uniform` is supported
        #[arg(long)]
        baseline: Option<String>,
        #[command(flatten)]
        rest: Overrides,
    },
}

fn build_config(cli: &Cli, overrides: &[String]) -> stageprune::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> stageprune::Result<()> {
    let overrides = match &cli.command {
        Command::Analyze(o) | Command::Train(o) => &o.overrides,
        Command::Prune { rest, .. } | Command::Sample { rest, .. } | Command::Eval { rest, .. } => &rest.overrides,
    };
    let cfg = build_config(&cli, overrides)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let dense = |c: &Option<PathBuf>| c.clone().unwrap_or_else(|| cfg.out_dir.join(DENSE_CHECKPOINT));
    match &cli.command {
        Command::Analyze(_) => {
            let plan = cli::cmd_analyze(&cfg)?;
            println!("dividers: {} {}", plan.dividers.0, plan.dividers.1);
            for s in 0..3 {
                let (lo, hi) = plan.stage_range(s);
                println!("stage {s}: t in [{lo}, {hi}], sparsity {:.4}", plan.sparsities[s]);
            }
            println!("wrote {} and {}", cfg.out_dir.join("curves.csv").display(), cfg.out_dir.join("plan.txt").display());
        }
        Command::Train(_) => {
            let out = cli::cmd_train(&cfg)?;
            println!("final epoch loss {:.5}", out.final_loss);
            println!("held-out loss {:.5} -> {:.5}", out.held_out_before, out.held_out_after);
            println!("wrote {}", out.checkpoint.display());
        }
        Command::Prune { checkpoint, plan, .. } => {
            let (mosaic, reports) = cli::cmd_prune(&cfg, &dense(checkpoint), plan.as_deref())?;
            println!("dividers: {} {}", mosaic.plan.dividers.0, mosaic.plan.dividers.1);
            for r in &reports {
                let err = r.layers.iter().map(|l| l.result.recon_error).fold(0.0, |a, b| a + b);
                println!("stage {}: sparsity {:.4}, {} layers pruned, total reconstruction error {err:.5}", r.stage, r.sparsity, r.layers.len());
            }
            println!("wrote {}", cfg.out_dir.join(MOSAIC_DIR).display());
        }
        Command::Sample { checkpoint, mosaic, .. } => {
            let path = cli::cmd_sample(&cfg, &dense(checkpoint), mosaic.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Eval { checkpoint, mosaic, baseline, .. } => {
            let reports = cli::cmd_eval(&cfg, &dense(checkpoint), mosaic.as_deref(), baseline.as_deref())?;
            for r in &reports {
                println!("{:10} divergence {:.6}  MACs {} / {}", r.label, r.divergence, r.macs, r.dense_macs);
            }
            println!("wrote {}", cfg.out_dir.join("report.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
