use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cfan::aggregation::PoolingMode;
use cfan::cli::{cmd_aggregate, cmd_analyze_corr, cmd_evaluate, cmd_gen_data, cmd_train, EvalInput, EvalOptions};
use cfan::config::RunConfig;

/// Component-wise quality-aware template aggregation.
#[derive(Parser)]
#[command(name = "cfan", version)]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data seed for gen-data and the training seed for train.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature file.
    GenData {
        /// Feature file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a quality head on a feature file.
    Train {
        /// Feature file to train on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pooling mode of the head (cfan or instance).
        #[arg(long)]
        mode: Option<PoolingMode>,
        /// Model output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Pool every template of a feature file into one representation.
    Aggregate {
        /// Feature file with the templates to pool.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trained quality head; required for cfan and instance.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Pooling mode.
        #[arg(long)]
        mode: Option<PoolingMode>,
        /// `subject<TAB>template` lines selecting and ordering the output.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Representation file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score representation files and print a metric report.
    Evaluate(EvaluateArgs),
    /// Dump the intra-class correlation of embedding components as CSV.
    AnalyzeCorr {
        /// Feature file to analyze.
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    /// Probe representation file.
    #[arg(long, requires = "gallery", conflicts_with = "reps")]
    probe: Option<PathBuf>,
    /// Gallery representation file.
    #[arg(long, requires = "probe")]
    gallery: Option<PathBuf>,
    /// Single representation file, split into gallery and probes or used with --pairs.
    #[arg(long)]
    reps: Option<PathBuf>,
    /// `template_a<TAB>template_b<TAB>0|1` lines.
    #[arg(long, requires = "reps")]
    pairs: Option<PathBuf>,
    /// Leave every k-th subject out of the gallery when splitting --reps.
    #[arg(long, conflicts_with = "pairs")]
    unmated_every: Option<usize>,
    /// Folds for the pair protocol.
    #[arg(long, default_value_t = cfan::evaluation::DEFAULT_FOLDS)]
    folds: usize,
    /// Prefix for CSV curve dumps.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn pick<'a>(flag: &'a Option<PathBuf>, fallback: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    match flag.as_deref().or(fallback.as_deref()) {
        Some(p) => Ok(p),
        None => bail!("missing {what} path (pass --{what} or set it in the config)"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData { out } => {
            if let Some(s) = cli.seed {
                cfg.noise.seed = s;
            }
            cmd_gen_data(&cfg, pick(&out, &cfg.out, "out")?)?;
        }
        Command::Train { data, mode, out, log } => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let log_text = cmd_train(pick(&data, &cfg.data, "data")?, &cfg, pick(&out, &cfg.model, "out")?)?;
            if let Some(p) = log {
                std::fs::write(&p, log_text.to_text()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Aggregate {
            data,
            model,
            mode,
            templates,
            out,
        } => {
            let mode = mode.unwrap_or(cfg.mode);
            let model = model.or(cfg.model.clone());
            cmd_aggregate(
                pick(&data, &cfg.data, "data")?,
                model.as_deref(),
                mode,
                templates.as_deref(),
                pick(&out, &cfg.out, "out")?,
            )?;
        }
        Command::Evaluate(a) => {
            let input = match (a.probe, a.gallery, a.reps.or(cfg.reps.clone()), a.pairs) {
                (Some(probe), Some(gallery), _, _) => EvalInput::Identification { probe, gallery },
                (_, _, Some(reps), Some(pairs)) => EvalInput::Pairs { reps, pairs },
                (_, _, Some(reps), None) => EvalInput::SelfSplit {
                    reps,
                    unmated_every: a.unmated_every,
                },
                _ => bail!("evaluate needs --probe with --gallery, or --reps"),
            };
            let opts = EvalOptions {
                folds: a.folds,
                curves: a.curves,
                ..EvalOptions::default()
            };
            let out = a.out.or(cfg.out.clone());
            let report = cmd_evaluate(&input, &opts, out.as_deref())?;
            if out.is_none() {
                print!("{}", report.to_text());
            }
        }
        Command::AnalyzeCorr { data, out } => {
            cmd_analyze_corr(pick(&data, &cfg.data, "data")?, pick(&out, &cfg.out, "out")?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
