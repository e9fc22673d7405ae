mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use sha2::{Digest, Sha256};

use commands::{Command, Report};
use config::ExperimentConfig;

/// Experiments for the Moran model with seed-banks in random environments.
#[derive(Debug, Parser)]
#[command(name = "seedbank", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the `output` key.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_hash(text: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(seed.to_le_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Writes every file to a temporary name first and renames once all writes
/// succeed; on failure nothing from this run is left behind.
fn commit(dir: &Path, report: &Report) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut staged = Vec::new();
    let result = (|| -> Result<()> {
        for (name, text) in &report.files {
            let tmp = dir.join(format!(".{name}.partial"));
            staged.push(tmp.clone());
            fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        for tmp in &staged {
            let _ = fs::remove_file(tmp);
        }
        return Err(e);
    }
    for ((name, _), tmp) in report.files.iter().zip(&staged) {
        fs::rename(tmp, dir.join(name)).with_context(|| format!("renaming {}", tmp.display()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let text = fs::read_to_string(&cli.config).with_context(|| format!("reading {}", cli.config.display()))?;
    let cfg = ExperimentConfig::from_text(&text, cli.seed)?;
    if let Some(c) = &cfg.command {
        if c != cli.command.name() {
            bail!("command: config is for {c:?}, invoked as {:?}", cli.command.name());
        }
    }
    let hash = config_hash(&text, cfg.seed);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    let report = pool.install(|| commands::run(cli.command, &cfg, &hash))?;
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("seedbank-out"));
    commit(&dir, &report)?;
    println!("{} config_hash={hash} seed={}", cli.command.name(), cfg.seed);
    for line in &report.summary {
        println!("{line}");
    }
    for (name, _) in &report.files {
        println!("wrote {}", dir.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
