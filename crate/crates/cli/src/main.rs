use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use kdcode::codebook::DiscreteCodeTable;
use kdcode::config::ExperimentConfig;
use kdcode::pipeline::{self, Baseline, Dataset};
use kdcode::tasks::{load_embeddings, render_table, write_reports, RunReport, SweepAxis};

#[derive(Parser)]
#[command(name = "kdcode", version, about = "Learn and evaluate K-way D-dimensional discrete codes for embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config file (flat TOML); defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set k=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let mut pairs = Vec::new();
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else { bail!("override `{o}` is not KEY=VALUE") };
            pairs.push((k.trim(), v.trim()));
        }
        cfg.set_all(&pairs)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a layer and write its code table, codebook, report and metrics.
    FitCodes {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score saved artifacts on the configured data.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory written by `fit-codes`.
        #[arg(short, long)]
        artifacts: PathBuf,
        /// Report file (JSON lines).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run comparison methods: full, low-rank, pq, scalar, random-codes,
    /// pretrained-codes.
    Baseline {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated method tags, or `all`.
        #[arg(short, long, default_value = "all")]
        method: String,
        /// Report file (JSON lines); the table is always printed.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Fit once per axis value and seed.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// k, dims, code-dim, composer, guidance or ablation.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; the ablation axis defaults to all stages.
        #[arg(long)]
        values: Option<String>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Report file (JSON lines); the table is always printed.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// List symbols grouped by code and compare intra-code similarity with
    /// the global mean.
    ProbeCodes {
        #[command(flatten)]
        config: ConfigArgs,
        /// Code table file.
        #[arg(long)]
        codes: PathBuf,
        /// Embedding file to measure similarity in; defaults to the
        /// configured data.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Number of codes to list.
        #[arg(long, default_value_t = 20)]
        limit: usize,
    },
    /// Print the default config with every key.
    Config,
}

fn emit(reports: &[RunReport], out: Option<&Path>) -> Result<()> {
    print!("{}", render_table(reports));
    if let Some(p) = out {
        write_reports(p, reports)?;
    }
    Ok(())
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitCodes { config, out } => {
            let cfg = config.load()?;
            let run = pipeline::fit_codes(&cfg)?;
            let vocab = Dataset::load(&cfg)?.vocab().symbols().to_vec();
            pipeline::save_run(&out, &run, &vocab)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            if let Some(step) = run.diverged_at {
                eprintln!("training diverged at step {step}; kept epoch {}", run.best_epoch);
            }
            print!("{}", render_table(std::slice::from_ref(&run.report)));
        }
        Command::Eval { config, artifacts, out } => {
            let cfg = config.load()?;
            let a = pipeline::load_artifacts(&artifacts)?;
            let report = pipeline::evaluate(&cfg, &a)?;
            emit(&[report], out.as_deref())?;
        }
        Command::Baseline { config, method, out } => {
            let cfg = config.load()?;
            let methods: Vec<Baseline> = if method == "all" {
                Baseline::ALL.to_vec()
            } else {
                split_list(&method).iter().map(|m| m.parse()).collect::<Result<_, _>>()?
            };
            let reports = methods.into_iter().map(|m| pipeline::run_baseline(&cfg, m)).collect::<Result<Vec<_>, _>>()?;
            emit(&reports, out.as_deref())?;
        }
        Command::Sweep { config, axis, values, seeds, out } => {
            let cfg = config.load()?;
            let values = match (values, axis) {
                (Some(v), _) => split_list(&v),
                (None, SweepAxis::Ablation) => pipeline::ABLATION_STAGES.iter().map(|s| s.to_string()).collect(),
                (None, _) => bail!("--values is required for this axis"),
            };
            let seeds: Vec<u64> = match seeds {
                Some(s) => split_list(&s).iter().map(|v| v.parse()).collect::<Result<_, _>>()?,
                None => vec![cfg.seed],
            };
            let outcome = pipeline::run_sweep(&cfg, axis, &values, &seeds);
            for (v, e) in &outcome.failures {
                eprintln!("{}={v} failed: {e}", axis.key());
            }
            emit(&outcome.reports, out.as_deref())?;
            if outcome.reports.is_empty() {
                bail!("every sweep value failed");
            }
        }
        Command::ProbeCodes { config, codes, embeddings, limit } => {
            let cfg = config.load()?;
            let table = DiscreteCodeTable::load(&codes)?;
            let u = match embeddings {
                Some(p) => load_embeddings(&p)?.1,
                None => match Dataset::load(&cfg)? {
                    Dataset::Reconstruction { target, .. } => target,
                    Dataset::Classification { pretrained: Some(u), .. } => u,
                    Dataset::Classification { pretrained: None, .. } => bail!("no embeddings to probe; pass --embeddings"),
                },
            };
            let result = pipeline::probe_codes(&cfg, &table, &u)?;
            print!("{}", pipeline::render_probe(&result, limit));
        }
        Command::Config => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
