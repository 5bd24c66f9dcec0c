use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use fieldshift::commands::{execute, Command, Options};
use fieldshift::Error;
use serde_json::json;

#[derive(Clone, Copy, ValueEnum)]
enum Cmd {
    /// Generate the training and test scenes.
    Simulate,
    /// Train a network on the simulated training scene.
    Train,
    /// Predict every year of the test scene with the trained checkpoint.
    Predict,
    /// Train, predict and evaluate every cell of an ablation matrix.
    Ablate,
    /// Score predictions against the test scene labels.
    Evaluate,
}

#[derive(Parser)]
#[command(name = "fieldshift", version, about = "Cross-year field segmentation on simulated multi-year scenes")]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// JSON run config, ablation matrix, or the manifest of an earlier run.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap (all cores by default).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Disable photometric augmentation.
    #[arg(long)]
    no_photometric: bool,
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message, "exit_code": code}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("config", e.to_string().trim().to_string(), 2),
    };
    let cmd = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Train => Command::Train,
        Cmd::Predict => Command::Predict,
        Cmd::Ablate => Command::Ablate,
        Cmd::Evaluate => Command::Evaluate,
    };
    if cli.threads == Some(0) {
        return fail("config", "--threads must be at least 1".into(), 2);
    }
    let opts = Options {
        config: cli.config,
        seed: cli.seed,
        threads: cli.threads,
        out: cli.out,
        no_photometric: cli.no_photometric,
    };
    match execute(cmd, &opts) {
        Ok(report) => {
            for l in &report.lines {
                println!("{}", l);
            }
            println!("wrote {}", report.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string(), exit_code(&e)),
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
