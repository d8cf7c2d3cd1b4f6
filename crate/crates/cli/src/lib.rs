pub mod plot;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use lblm::classify::Task;
use lblm::forecast::{format_ladder, parse_ladder};
use lblm::pipeline::{self, parse_pairs, resolve_seed, RunConfig, SEED_ENV};
use lblm::pretrain::PretrainStage;
use lblm::signal::write_atomic;
use lblm::{LblmError, Result};

#[derive(Debug, Parser)]
#[command(name = "lblm", version, about = "Synthetic EEG pretraining, finetuning and forecasting")]
pub struct Cli {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and LBLM_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppresses the resolved-config log on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic raw dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, re-reference and downsample a raw dataset.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one pretraining stage.
    Pretrain {
        #[arg(long, value_parser = parse_stage)]
        stage: PretrainStage,
        /// Preprocessed dataset.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a classifier on the training sessions.
    Finetune {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a finetuned checkpoint on the test sessions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast test trials over a context/target ladder.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `ctx:target,...`; defaults to the config ladder.
        #[arg(long)]
        ladder: Option<String>,
        #[arg(long = "in")]
        input: PathBuf,
        /// Output prefix; writes `.csv`, `.summary.csv` and `.overlay.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired-condition band-power F-scores.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "rest:silent,read:silent")]
        pairs: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an overlay or training-log CSV as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_stage(s: &str) -> std::result::Result<PretrainStage, String> {
    PretrainStage::parse(s).map_err(|e| e.to_string())
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(cli.seed, env.as_deref(), base.seed)?;
    base.resolve(seed)
}

/// Runs one command; the returned line is printed on success.
pub fn run(cli: &Cli) -> Result<String> {
    if let Command::Plot { input, out } = &cli.cmd {
        let text = std::fs::read_to_string(input).map_err(|e| LblmError::io(input, e))?;
        write_atomic(out, plot::render(&text)?.as_bytes())?;
        return Ok(format!("wrote {}", out.display()));
    }
    let cfg = load_config(cli)?;
    let hash = cfg.hash()?;
    if !cli.quiet {
        eprintln!("config_hash={hash}\n{}", cfg.to_json()?);
    }
    let shown = |p: &Path| p.display().to_string();
    Ok(match &cli.cmd {
        Command::Synth { out } => {
            pipeline::cmd_synth(&cfg, out)?;
            format!("wrote {}", shown(out))
        }
        Command::Preprocess { input, out } => {
            pipeline::cmd_preprocess(&cfg, input, out)?;
            format!("wrote {}", shown(out))
        }
        Command::Pretrain { stage, input, init, out } => {
            let h = pipeline::cmd_pretrain(&cfg, *stage, input, init.as_deref(), out)?;
            format!("wrote {} sha256={h}", shown(out))
        }
        Command::Finetune { task, input, init, out } => {
            let r = pipeline::cmd_finetune(&cfg, *task, input, init, out)?;
            format!("wrote {} val_accuracy={:.4}", shown(out), r.accuracy)
        }
        Command::Eval { checkpoint, task, input, out } => {
            let r = pipeline::cmd_eval(&cfg, checkpoint, input, *task, out)?;
            format!("wrote {} test_accuracy={:.4} n={}", shown(out), r.accuracy, r.n_trials)
        }
        Command::Forecast { checkpoint, ladder, input, out } => {
            let ladder = match ladder {
                Some(s) => parse_ladder(s)?,
                None => cfg.forecast.eval.ladder.clone(),
            };
            pipeline::cmd_forecast(&cfg, checkpoint, input, &ladder, out)?;
            format!("wrote {}.csv ladder={}", shown(out), format_ladder(&ladder))
        }
        Command::Analyze { input, pairs, out } => {
            let rows = pipeline::cmd_analyze(&cfg, input, &parse_pairs(pairs)?, out)?;
            format!("wrote {} rows={}", shown(out), rows.len())
        }
        Command::Plot { .. } => unreachable!(),
    })
}

/// One-line JSON error for stderr.
pub fn error_json(e: &LblmError) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}
