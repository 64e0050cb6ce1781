//! Command-line front end: parses arguments, loads the run configuration
//! (file + environment overrides), and dispatches to the library runner.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence abort,
//! 4 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use metrolab::analysis::SensitivityFormula;
use metrolab::config::{RunConfig, TargetVariant};
use metrolab::error::Error;
use metrolab::runner::{self, CommandOutcome, EXIT_DIVERGENCE};

#[derive(Parser)]
#[command(name = "metrolab", version, about = "Desk-scale denoising pretraining lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    MaskedOnly,
    AllTokens,
    AllTokensMaskedLoss,
}

impl From<VariantArg> for TargetVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::MaskedOnly => TargetVariant::MaskedOnly,
            VariantArg::AllTokens => TargetVariant::AllTokens,
            VariantArg::AllTokensMaskedLoss => TargetVariant::AllTokensMaskedLoss,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormulaArg {
    /// |theta_j * g_j| (first-order zero-out estimate)
    Taylor,
    /// |theta_{-j}^T g| (full-vector form)
    Printed,
}

impl From<FormulaArg> for SensitivityFormula {
    fn from(f: FormulaArg) -> Self {
        match f {
            FormulaArg::Taylor => SensitivityFormula::TaylorZeroOut,
            FormulaArg::Printed => SensitivityFormula::PaperPrinted,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain with the configured objective (metro or t5_span).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint with trainer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finetune the main model from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank-classification evaluation over the task mixture.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
    },
    /// Under-activated-neuron census over a checkpoint.
    AnalyzeActivations {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
        /// A neuron is under-activated if inactive on this fraction of tokens.
        #[arg(long, default_value_t = 0.995)]
        threshold: f64,
    },
    /// Parameter-sensitivity report over a checkpoint.
    AnalyzeSensitivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long, value_enum, default_value_t = FormulaArg::Taylor)]
        formula: FormulaArg,
    },
    /// Measure decoding-target ambiguity over the corpus.
    DiagnoseAmbiguity {
        #[arg(long)]
        config: PathBuf,
        /// Score masks with this checkpoint instead of a seeded random model.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, default_value_t = 0.4)]
        ratio: f64,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
    },
    /// Monte-Carlo positional-dependence statistics of the mask samplers.
    DiagnoseLeakage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
    /// Run the named configuration grid (one run per ablation row).
    AblationGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "table4")]
        preset: String,
        /// Override total steps for every run in the grid.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Aggregate artifacts from existing run directories; recomputes nothing.
    ExportReport {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<CommandOutcome, Error> {
    match command {
        Command::Pretrain { config, seed, resume } => {
            let cfg = load_config(&config, seed)?;
            runner::cmd_pretrain(&cfg, resume.as_deref())
        }
        Command::Finetune { config, seed, from } => {
            let cfg = load_config(&config, seed)?;
            runner::cmd_finetune(&cfg, &from)
        }
        Command::Eval { config, from } => {
            let cfg = load_config(&config, None)?;
            runner::cmd_eval(&cfg, &from)
        }
        Command::AnalyzeActivations {
            config,
            from,
            threshold,
        } => {
            let cfg = load_config(&config, None)?;
            runner::cmd_analyze_activations(&cfg, &from, threshold)
        }
        Command::AnalyzeSensitivity { config, from, formula } => {
            let cfg = load_config(&config, None)?;
            runner::cmd_analyze_sensitivity(&cfg, &from, formula.into())
        }
        Command::DiagnoseAmbiguity {
            config,
            from,
            variant,
            ratio,
            trials,
        } => {
            let cfg = load_config(&config, None)?;
            runner::cmd_diagnose_ambiguity(&cfg, from.as_deref(), ratio, trials, variant.map(Into::into))
        }
        Command::DiagnoseLeakage { config, n, draws } => {
            let cfg = load_config(&config, None)?;
            runner::cmd_diagnose_leakage(&cfg, n, draws)
        }
        Command::AblationGrid { config, preset, steps } => {
            let cfg = load_config(&config, None)?;
            runner::cmd_ablation_grid(&cfg, &preset, steps)
        }
        Command::ExportReport { config } => {
            let cfg = load_config(&config, None)?;
            runner::cmd_export_report(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            println!("artifacts: {}", outcome.run_dir.display());
            if outcome.diverged {
                ExitCode::from(EXIT_DIVERGENCE as u8)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(runner::exit_code_for(&err) as u8)
        }
    }
}
