//! `aspira` command line: synthetic cohort generation, the cohort/feature
//! pipeline, model training and evaluation, and treatment-effect tables.
//!
//! Exit codes: 0 success, 1 data/runtime error, 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aspira::config::RunConfig;
use aspira::domain::Treatment;
use aspira::error::Error;
use aspira::runner;

#[derive(Parser)]
#[command(name = "aspira", version, about = "Postoperative aspiration risk modeling and causal analysis on synthetic cohorts")]
struct Cli {
    /// Configuration file (flat key = value with [sections]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap (0 = library default). Outputs are identical for
    /// any value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic admission cohort with ground-truth effects.
    Generate,
    /// Cohort selection, labeling, features, model, metrics, ATE/CATE
    /// tables and error analysis in one pass.
    Run {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Cohort selection and feature extraction only.
    Pipeline {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train the configured model family on a saved features/cohort pair.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Evaluate a saved model on its held-out split.
    Evaluate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Estimate one treatment's ATE from a saved features file.
    Ate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        treatment: String,
    },
    /// Gender-conditional treatment effects from a saved features file.
    Cate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "gender")]
        group: String,
    },
    /// False-negative error analysis for a saved model.
    FnAnalysis {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    if cfg.threads > 0 {
        // Ignore re-initialization: the pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match &cli.command {
        Command::Generate => {
            let (n, positives) = runner::cmd_generate(cfg, &cli.out)?;
            println!("generated {n} admissions ({positives} aspiration outcomes) -> {}", cli.out.display());
        }
        Command::Run { input } => {
            runner::cmd_run(cfg, input, &cli.out)?;
            println!("run complete -> {}", cli.out.display());
        }
        Command::Pipeline { input } => {
            let out = runner::cmd_pipeline(cfg, input, &cli.out)?;
            println!(
                "cohort: {} positives, {} negatives ({} eligible), {} exclusions -> {}",
                out.cohort.positives.len(),
                out.cohort.negatives.len(),
                out.cohort.eligible_negatives.len(),
                out.cohort.exclusions.len(),
                cli.out.display()
            );
        }
        Command::Train { input } => {
            let model = runner::cmd_train(cfg, input, &cli.out)?;
            println!("trained {} model -> {}", model.family().as_str(), cli.out.display());
        }
        Command::Evaluate { input } => {
            let report = runner::cmd_evaluate(cfg, input, &cli.out)?;
            println!(
                "accuracy {:.4}  sensitivity {:.4}  specificity {:.4}  auroc {}",
                report.accuracy,
                report.sensitivity,
                report.specificity,
                report.auroc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Ate { input, treatment } => {
            let treatment: Treatment = treatment
                .parse()
                .map_err(|e: Error| Error::Config(e.to_string()))?;
            let est = runner::cmd_ate(cfg, input, &cli.out, treatment)?;
            println!("{}", runner::format_estimate_line(&est));
        }
        Command::Cate { input, group } => {
            if group != "gender" {
                return Err(Error::Config(format!(
                    "unknown group {group:?}; supported: gender"
                )));
            }
            let reports = runner::cmd_cate(cfg, input, &cli.out)?;
            for (treatment, report) in &reports {
                for (name, est) in &report.groups {
                    println!("{treatment} [{name}] {est}");
                }
                println!(
                    "{treatment} [difference] {} ci=[{:.3}, {:.3}]",
                    report.difference, report.difference.ci_low, report.difference.ci_high
                );
            }
        }
        Command::FnAnalysis { input } => {
            let profile = runner::cmd_fn_analysis(cfg, input, &cli.out)?;
            println!(
                "false negatives: {} of {} positives{}",
                profile.n_false_negatives,
                profile.n_positives,
                if profile.empty { " (empty profile)" } else { "" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
