use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use shieldrl::function_encoder::BasisSet;
use shieldrl::harness::acceptance::{run_suite, Suite};
use shieldrl::harness::{evaluate, pretrain_fe, train, Checkpoint, EvalOptions, ExperimentConfig, MetricsWriter};

#[derive(Parser)]
#[command(
    name = "shieldrl",
    version,
    about = "Shielded, safety-regularized RL on hidden-parameter point-mass tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect random-policy data and train the function-encoder basis.
    PretrainFe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `section.key=value` overrides applied on top of the config file.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Train a policy.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Basis artifact; required when the shield or FE context is enabled.
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines metrics file.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint and print a JSON summary.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Out-of-distribution hidden parameters and extra obstacles.
        #[arg(long)]
        ood: bool,
        /// Override the checkpoint's shield setting.
        #[arg(long, conflicts_with = "shield")]
        no_shield: bool,
        #[arg(long)]
        shield: bool,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run an acceptance suite and print one line per criterion.
    Accept {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Also write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    Ok(ExperimentConfig::from_toml_with_overrides(&text, overrides)?)
}

fn metrics_writer(path: Option<&Path>) -> Result<MetricsWriter> {
    Ok(match path {
        Some(p) => MetricsWriter::to_writer(Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        ))),
        None => MetricsWriter::memory(),
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::PretrainFe { config, out, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let (basis, prov) = pretrain_fe(&cfg)?;
            basis.save(&out, Some(&prov))?;
            println!(
                "basis k={} held-out mse={:.3e} context-free mse={:.3e} mean-predictor mse={:.3e}",
                basis.k(),
                prov.heldout_mse,
                prov.context_free_mse,
                prov.mean_predictor_mse
            );
        }
        Command::Train {
            config,
            basis,
            out,
            metrics,
            overrides,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let basis = match basis {
                Some(p) => Some(
                    BasisSet::load(&p)
                        .with_context(|| format!("loading basis {}", p.display()))?
                        .0,
                ),
                None => None,
            };
            let mut writer = metrics_writer(metrics.as_deref())?;
            let ckpt = train(&cfg, basis, &mut writer)?;
            writer.flush()?;
            ckpt.save(&out)?;
            println!(
                "trained {} epochs, {} steps, lambda={:.4}",
                ckpt.epochs_done, ckpt.steps_done, ckpt.lambda
            );
        }
        Command::Eval {
            ckpt,
            episodes,
            ood,
            no_shield,
            shield,
            metrics,
        } => {
            let ckpt = Checkpoint::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let mut opts = EvalOptions::new(episodes, ood);
            if no_shield {
                opts.shield = Some(false);
            } else if shield {
                opts.shield = Some(true);
            }
            let mut writer = metrics_writer(metrics.as_deref())?;
            let (summary, _) = evaluate(&ckpt, &opts, Some(&mut writer))?;
            writer.flush()?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Accept { suite, report } => {
            // progress goes to stderr; the report lines go to stdout
            let results = run_suite(suite, &mut std::io::stderr())?;
            let mut out = std::io::stdout().lock();
            for c in &results {
                writeln!(out, "{}", c.line())?;
            }
            if let Some(p) = report {
                std::fs::write(&p, serde_json::to_string_pretty(&results)?)?;
            }
            let failed = results.iter().filter(|c| !c.pass).count();
            writeln!(out, "{} of {} criteria passed", results.len() - failed, results.len())?;
        }
    }
    Ok(())
}
