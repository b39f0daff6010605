use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use han_core::corpus::{load_conll, write_conll, Utterance};
use han_core::harness::{attention_dump, lr_sweep, parse_lrs, train, write_sweep_csv, Config, RunStatus};
use han_core::HanModel;

#[derive(Parser)]
#[command(name = "han", version, about = "Joint intent detection and slot filling with higher-order attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `checkpoint` from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `metrics_log` from the config.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Score a checkpoint on a labelled CoNLL file and print the report as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Label utterances and write them in CoNLL format.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CoNLL file; existing labels are ignored.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Read one whitespace-tokenized utterance per line instead of CoNLL.
        #[arg(long)]
        plain: bool,
    },
    /// Train once per learning rate and activation and write a CSV table.
    SweepLr {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated learning rates.
        #[arg(long, default_value = "1e-4,1e-3,1e-2,1e-1")]
        lrs: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-layer attention maps for one utterance as JSON.
    DumpAttention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_model(path: &Path) -> Result<HanModel> {
    HanModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, checkpoint, metrics } => {
            let mut cfg = Config::load(&config)?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if metrics.is_some() {
                cfg.metrics_log = metrics;
            }
            if cfg.checkpoint.is_none() {
                bail!("no checkpoint path: set `checkpoint` in the config or pass --checkpoint");
            }
            let out = train(&cfg)?;
            let best = out.best_report();
            println!(
                "best epoch {}: slot_f1={:.4} intent_acc={:.4} overall_acc={:.4}",
                out.best_epoch, best.slot_f1, best.intent_acc, best.overall_acc
            );
        }
        Command::Eval { model, data } => {
            let model = load_model(&model)?;
            let data = load_conll(&data)?;
            let report = model.evaluate(&data.utterances)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Predict { model, input, output, plain } => {
            let model = load_model(&model)?;
            let utterances = read_inputs(&input, plain)?;
            let predictions = model.predict_all(&utterances)?;
            write_conll(&output, &predictions)?;
        }
        Command::SweepLr { config, lrs, out } => {
            let cfg = Config::load(&config)?;
            let rows = lr_sweep(&cfg, &parse_lrs(&lrs)?)?;
            write_sweep_csv(&rows, &out)?;
            let failed = rows.iter().filter(|r| r.status == RunStatus::Failed).count();
            println!("{} runs, {failed} failed, table written to {}", rows.len(), out.display());
        }
        Command::DumpAttention { model, text, out } => {
            let model = load_model(&model)?;
            let tokens: Vec<&str> = text.split_whitespace().collect();
            if tokens.is_empty() {
                bail!("--text is empty");
            }
            attention_dump(&model, &tokens)?.save(&out)?;
        }
    }
    Ok(())
}

fn read_inputs(path: &Path, plain: bool) -> Result<Vec<Utterance>> {
    if !plain {
        return Ok(load_conll(path)?.utterances);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let utterances = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let tokens: Vec<String> = l.split_whitespace().map(String::from).collect();
            let slots = vec!["O".to_string(); tokens.len()];
            Utterance { tokens, slots, intent: "?".into() }
        })
        .collect();
    Ok(utterances)
}
