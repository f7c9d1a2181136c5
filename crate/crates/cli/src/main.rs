//! `biaslab` — corpus generation, two-stage training, ablation evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 runtime
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use biaslab::eval::render_table;
use biaslab::pipeline::{PipelineConfig, PipelineError, TrainStage};

const CONFIG_ENV: &str = "BIASLAB_CONFIG";

#[derive(Parser)]
#[command(
    name = "biaslab",
    about = "Train and evaluate a tiny reasoning bias detector",
    version
)]
struct Cli {
    /// Config file (JSON). Falls back to $BIASLAB_CONFIG, then to built-in
    /// defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Sft,
    Dpo,
    Instruction,
}

impl From<StageArg> for TrainStage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Sft => TrainStage::Sft,
            StageArg::Dpo => TrainStage::Dpo,
            StageArg::Instruction => TrainStage::Instruction,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and run manifest.
    Gen,
    /// Run one training stage for every configured seed.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Evaluate the configured modes and write report files.
    Eval,
    /// Print the table from an existing report.
    Report,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(&p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen => {
            let corpus = cfg.cmd_gen()?;
            let train = corpus
                .iter()
                .filter(|s| s.split == biaslab::taskgen::Split::Train)
                .count();
            println!(
                "wrote {} train / {} held-out samples under {}",
                train,
                corpus.len() - train,
                cfg.run_dir().display()
            );
        }
        Command::Train { stage } => {
            let stage = TrainStage::from(*stage);
            let logs = cfg.cmd_train(stage)?;
            for (seed, log) in cfg.seeds.iter().zip(&logs) {
                let loss = match (log.epoch_losses.first(), log.epoch_losses.last()) {
                    (Some(first), Some(last)) => format!("loss {first:.4} -> {last:.4}"),
                    _ => "no epochs".to_string(),
                };
                let margin = match (log.epoch_margins.first(), log.epoch_margins.last()) {
                    (Some(first), Some(last)) if log.epoch_margins.len() > 1 => {
                        format!(", margin {first:.4} -> {last:.4}")
                    }
                    _ => String::new(),
                };
                println!(
                    "seed {seed} {}: {} examples, {loss}{margin}",
                    log.stage, log.n_examples
                );
            }
        }
        Command::Eval => {
            let report = cfg.cmd_eval()?;
            print!("{}", render_table(&report));
            println!(
                "\nreport written to {}",
                cfg.run_dir().join("report.json").display()
            );
        }
        Command::Report => {
            let path = cfg.run_dir().join("report.json");
            if !path.exists() {
                return Err(PipelineError::MissingPrerequisite {
                    stage: "report".into(),
                    missing: format!("{} (run eval first)", path.display()),
                });
            }
            let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let report: biaslab::eval::EvalReport =
                serde_json::from_str(&text).map_err(|e| PipelineError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            print!("{}", render_table(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
