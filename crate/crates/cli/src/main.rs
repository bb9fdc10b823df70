use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptmtok_core::Error;

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "ptmtok",
    version,
    about = "Residue micro-environment tokenizer and PTM type predictor"
)]
#[command(after_help = RunConfig::key_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, build graphs and dump node features with per-protein checksums.
    Featurize {
        input: PathBuf,
        output: PathBuf,
        /// Worker threads; defaults to the hardware count.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Identity-clustered train/val/test split.
    Split {
        input: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.40)]
        threshold: f64,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        /// Also write train.jsonl, val.jsonl and test.jsonl here.
        #[arg(long, value_name = "DIR")]
        write_splits: Option<PathBuf>,
    },
    /// Stage 1: encoder, decoder and codebook.
    TrainCodebook { train: PathBuf, out_dir: PathBuf },
    /// Stage 2: the predictor on frozen tokens.
    TrainPredictor {
        train: PathBuf,
        stage1_dir: PathBuf,
        out_dir: PathBuf,
    },
    /// Metrics on a labelled set. SOURCE is a model directory or a predictions JSONL file.
    Evaluate {
        test: PathBuf,
        source: PathBuf,
        report: PathBuf,
    },
    /// Per-residue predictions for a PDB file or a JSONL dataset.
    Predict {
        input: PathBuf,
        model_dir: PathBuf,
        output: PathBuf,
    },
    /// Token embeddings and their classes as CSV.
    ExportEmbeddings { model_dir: PathBuf, output: PathBuf },
    /// Seeded synthetic long-tail dataset.
    Synth {
        output: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Comma-separated class weights summing to 1.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long, default_value_t = 30)]
        min_len: usize,
        #[arg(long, default_value_t = 60)]
        max_len: usize,
    },
}

/// Exit status per error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Parse { .. } => 2,
        Error::Dataset(_) => 3,
        Error::Geometry(_) => 4,
        Error::Shape(_) | Error::Index(_) => 5,
        Error::Train { .. } | Error::Numerical(_) => 6,
        Error::Checkpoint(_) => 7,
        Error::Split(_) => 8,
        Error::Io(_) => 9,
    }
}

fn fail(e: &Error) -> ExitCode {
    let code = exit_code(e);
    let line = serde_json::json!({ "error": e.kind(), "code": code, "message": e.to_string() });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn load_config(common: &Common) -> ptmtok_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &common.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            return fail(&Error::Config(first.to_string()));
        }
    };
    let run = || -> ptmtok_core::Result<()> {
        let mut cfg = load_config(&cli.common)?;
        match cli.command {
            Command::Featurize { input, output, threads } => {
                if let Some(t) = threads {
                    cfg.set("threads", &t.to_string())?;
                }
                commands::featurize(&cfg, &input, &output)
            }
            Command::Split {
                input,
                manifest,
                threshold,
                ratios,
                write_splits,
            } => commands::split(&cfg, &input, &manifest, threshold, &ratios, write_splits.as_deref()),
            Command::TrainCodebook { train, out_dir } => commands::train_codebook(&cfg, &train, &out_dir),
            Command::TrainPredictor {
                train,
                stage1_dir,
                out_dir,
            } => commands::train_predictor(&cfg, &train, &stage1_dir, &out_dir),
            Command::Evaluate { test, source, report } => commands::evaluate(&cfg, &test, &source, &report),
            Command::Predict {
                input,
                model_dir,
                output,
            } => commands::predict(&cfg, &input, &model_dir, &output),
            Command::ExportEmbeddings { model_dir, output } => commands::export_embeddings(&cfg, &model_dir, &output),
            Command::Synth {
                output,
                n,
                weights,
                min_len,
                max_len,
            } => commands::synth(&cfg, &output, n, weights.as_deref(), min_len, max_len),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
