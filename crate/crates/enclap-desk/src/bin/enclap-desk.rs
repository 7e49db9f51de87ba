//! Pipeline entry point: `enclap-desk <stage> --config <path> [--seed N]
//! [--out DIR] [key=value ...]`.

use anyhow::{bail, Result};
use clap::Parser;
use enclap_desk::config::parse_config;
use enclap_desk::stages::run_stage;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "enclap-desk", about = "Desk-scale audio captioning pipeline")]
struct Cli {
    /// Stage to run: make-data, train-codec, train-clap, train-captioner,
    /// caption, evaluate, or ablate.
    stage: String,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory from the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Additional `key=value` overrides, applied after the config file.
    overrides: Vec<String>,
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut overrides: Vec<(String, String)> = Vec::new();
    for raw in &cli.overrides {
        let Some((k, v)) = raw.split_once('=') else {
            bail!("override {raw:?} is not of the form key=value");
        };
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("out_dir".into(), out.display().to_string()));
    }
    let cfg = parse_config(cli.config.as_deref(), &overrides)?;
    run_stage(&cli.stage, &cfg)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
