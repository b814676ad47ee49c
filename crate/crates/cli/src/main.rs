use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tokenmixer::commands::{self, Outcome};
use tokenmixer::report::{render_artifacts, Artifact};
use tokenmixer::ExperimentConfig;

/// Train, ablate and verify a desk-scale TokenMixer ranking model.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and report AUC against the oracle.
    Train {
        /// Directory for report.json, metrics.jsonl and checkpoint.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare tape gradients with central finite differences.
    Gradcheck,
    /// Train ablation variants over common seeds and report AUC deltas.
    Ablate {
        /// Shipped table to run (repeatable).
        #[arg(long = "table")]
        tables: Vec<String>,
        /// Single preset `table/row` to run against its table base (repeatable).
        #[arg(long = "preset")]
        presets: Vec<String>,
        /// Run everything twice and require identical reports.
        #[arg(long)]
        check_determinism: bool,
        /// List tables and presets instead of running.
        #[arg(long)]
        list: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate token-parallel execution and compare with the serial model.
    SimParallel,
    /// Evaluate a checkpoint on the FP8 E4M3 path against full precision.
    QuantizeEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Draw a fresh held-out set with this seed instead of the stored one.
        #[arg(long)]
        eval_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render saved reports as comparison tables.
    Report { files: Vec<PathBuf> },
    /// Print the full default config.
    DefaultConfig,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let cfg = load_config(cli.config.as_deref())?;
    let passed = |text: String| Outcome { text, passed: true };
    Ok(match cli.command {
        Command::Train { out } => commands::train_cmd(&cfg, out.as_deref())?.0,
        Command::Gradcheck => commands::gradcheck_cmd(&cfg)?,
        Command::Ablate { list: true, .. } => {
            let mut text = String::new();
            for t in tokenmixer_core::ablation::tables() {
                text += &format!("{}: {}\n", t.name, t.title);
                for (n, v) in t.preset_names().iter().zip(std::iter::once(&t.base).chain(&t.matrix())) {
                    text += &format!("  {n}  [{}]\n", v.toggles.join(", "));
                }
            }
            passed(text)
        }
        Command::Ablate {
            tables,
            presets,
            check_determinism,
            out,
            ..
        } => commands::ablate_cmd(&cfg, &tables, &presets, check_determinism, out.as_deref())?,
        Command::SimParallel => commands::sim_parallel_cmd(&cfg)?,
        Command::QuantizeEval {
            checkpoint,
            eval_seed,
            out,
        } => commands::quantize_eval_cmd(&cfg, &checkpoint, eval_seed, out.as_deref())?,
        Command::Report { files } => {
            let items = files.iter().map(|f| Artifact::load(f)).collect::<Result<Vec<_>>>()?;
            passed(render_artifacts(&items))
        }
        Command::DefaultConfig => passed(cfg.to_toml()?),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{}", out.text);
            if out.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("invariant check failed");
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
