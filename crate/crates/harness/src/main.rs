use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resonance::attacks::AttackConfig;
use resonance::DefenseConfig;
use resonance_harness::config::{DatasetConfig, ExperimentConfig, CONFIG_REFERENCE};
use resonance_harness::error::{Error, Result, StageExt};
use resonance_harness::experiment::{run_attacks, run_training, stereo_demo};
use resonance_harness::{run_experiment, ExperimentReport};

#[derive(Parser)]
#[command(name = "resonance", version, about = "Latent-ensemble defense experiments", after_help = CONFIG_REFERENCE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured classifier and save its weight bundle.
    #[command(after_help = CONFIG_REFERENCE)]
    Train(Common),
    /// Generate the configured attacks and save them as an adversarial cache.
    #[command(after_help = CONFIG_REFERENCE)]
    Attack(Common),
    /// Run the full pipeline and write the report (CSV for `.csv`, JSON otherwise).
    #[command(after_help = CONFIG_REFERENCE)]
    DefendEval {
        #[command(flatten)]
        common: Common,
        /// Adversarial cache to read or fill (overrides the config's `cache`).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run the stereo track and write the report plus images of the first pair
    /// into the `--out` directory. Without `--config`, uses the default stereo
    /// setup (FGSM at 0.02 against SR with d = 1).
    #[command(after_help = CONFIG_REFERENCE)]
    StereoDemo(Common),
    /// Write a report as CSV or JSON, either by running `--config` or by
    /// converting an existing JSON report given with `--from`.
    #[command(after_help = CONFIG_REFERENCE)]
    Report {
        #[command(flatten)]
        common: Common,
        /// Existing JSON report to convert instead of running an experiment.
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn default_stereo_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml("sample_count = 20\n[dataset]\nkind = \"stereo_rds\"\n")
        .expect("built-in config parses");
    cfg.attacks = vec![AttackConfig::fgsm(0.02)];
    cfg.defenses = vec![DefenseConfig::sr(1, "features")];
    cfg
}

fn write_report(report: &ExperimentReport, path: &Path) -> Result<()> {
    report.emit(path).stage("write")?;
    println!("report hash {}", report.content_hash());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c).stage("config")?;
            let bundle = run_training(&cfg)?;
            bundle.save(&c.out).stage("write")?;
            if let Some(acc) = bundle.meta.val_accuracy {
                println!("test accuracy {acc:.4}");
            }
        }
        Command::Attack(c) => {
            let cfg = load(&c).stage("config")?;
            let archive = run_attacks(&cfg)?;
            archive.save(&c.out).stage("write")?;
            println!("{} adversarial tensors", archive.tensors.len());
        }
        Command::DefendEval { common, cache } => {
            let mut cfg = load(&common).stage("config")?;
            if cache.is_some() {
                cfg.cache = cache;
            }
            let report = run_experiment(&cfg)?;
            write_report(&report, &common.out)?;
        }
        Command::StereoDemo(c) => {
            let mut cfg = match &c.config {
                Some(_) => load(&c).stage("config")?,
                None => default_stereo_config(),
            };
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            if !matches!(cfg.dataset, DatasetConfig::StereoRds { .. }) {
                return Err(Error::Config("stereo-demo needs a stereo_rds dataset".into())).stage("config");
            }
            let report = stereo_demo(&cfg, &c.out)?;
            write_report(&report, &c.out.join("report.json"))?;
            report.emit(&c.out.join("report.csv")).stage("write")?;
            print!("{}", report.to_csv().stage("write")?);
        }
        Command::Report { common, from } => {
            let report = match from {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).stage("read")?;
                    let r = ExperimentReport::from_json(&text).stage("read")?;
                    r.check_invariants().stage("verify")?;
                    r
                }
                None => run_experiment(&load(&common).stage("config")?)?,
            };
            write_report(&report, &common.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
