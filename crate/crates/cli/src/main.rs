//! `impactx` — drive the pretrain → explain → train → evaluate → ablate
//! pipeline from the shell. Every subcommand wraps the corresponding
//! library function; exit codes are fixed (0 ok, 2 config, 3 training,
//! 4–7 stage-specific failures) so shell-level tests stay portable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use impactx_core::pipeline::{
    cmd_ablate, cmd_evaluate, cmd_explain, cmd_pretrain, cmd_train_impactx, exit_code, SplitKind,
    StrategyKind,
};

#[derive(Parser)]
#[command(
    name = "impactx",
    version,
    about = "Improve a frozen classifier's predictions by distilling its attribution maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitKind::Train,
            SplitArg::Val => SplitKind::Val,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Ae,
    Ed,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Ae => StrategyKind::Ae,
            StrategyArg::Ed => StrategyKind::Ed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Create a run directory, train and freeze the base model, and write
    /// its baseline evaluation report.
    Pretrain {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Run directory to create; must be empty or absent.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and cache attribution maps for one split. Idempotent.
    Explain {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train a distillation strategy on the cached explanations of the
    /// configured training-fraction subset.
    TrainImpactx {
        #[arg(long)]
        run: PathBuf,
        /// Override the strategy in the run's config.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Evaluate the fused predictor against the baseline report and write
    /// comparison reports, confusion CSVs, flip lists, and saliency PGMs.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the full pipeline over a (method × strategy × latent_dim ×
    /// fraction) grid, averaging accuracies over the grid's seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Grid file (JSON) of finite value lists.
        #[arg(long)]
        grid: PathBuf,
        /// Output directory; must be empty or absent.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> impactx_core::Result<()> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let summary = cmd_pretrain(&config, &out)?;
            println!(
                "pretrained model {} ({} epochs), baseline accuracy {:.4}",
                summary.model_hash, summary.epochs_run, summary.baseline_accuracy
            );
            println!("run directory: {}", summary.run.root().display());
        }
        Command::Explain { run, split } => {
            let summary = cmd_explain(&run, split.into())?;
            println!(
                "explained {} samples ({} split): {} cache hits, {} computed, {} model evals",
                summary.total,
                summary.split.as_str(),
                summary.cache_hits,
                summary.cache_misses,
                summary.value_evals
            );
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::TrainImpactx { run, strategy } => {
            let summary = cmd_train_impactx(&run, strategy.map(Into::into))?;
            println!(
                "trained strategy {} on {} samples; components: {}",
                summary.strategy.as_str(),
                summary.train_ids.len(),
                summary
                    .components
                    .values()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Evaluate { run } => {
            let summary = cmd_evaluate(&run)?;
            println!(
                "baseline {:.4} → fused {:.4} ({:+.4}); {} corrected, {} broken",
                summary.baseline_accuracy,
                summary.impactx_accuracy,
                summary.difference,
                summary.corrected,
                summary.broken
            );
            println!(
                "explanation similarity: mean cosine {:.4} vs permuted {:.4} over {} samples",
                summary.similarity.mean_cosine,
                summary.similarity.permuted_mean_cosine,
                summary.similarity.samples
            );
            if !summary.saliency_files.is_empty() {
                println!("saliency renderings: {}", summary.saliency_files.len());
            }
        }
        Command::Ablate { config, grid, out } => {
            let summary = cmd_ablate(&config, &grid, &out)?;
            println!(
                "ablation finished: {} rows ({} failed) → {}",
                summary.rows,
                summary.failures,
                summary.csv_path.display()
            );
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
            ExitCode::from(exit_code(&e).clamp(1, 255) as u8)
        }
    }
}
