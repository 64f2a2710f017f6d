use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use tagdyn_cli::{apply_seed, parse_config, run, Command, OUT_ENV};

#[derive(Parser)]
#[command(name = "tagdyn", version, about = "Sample, simulate and verify interacting Brownian particle systems")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's [output] dir, then $TAGDYN_OUT, then the current directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<bool> {
    let args = Args::parse();
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = parse_config(&text).map_err(tagdyn_cli::CliError::Config).with_context(|| format!("invalid config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        apply_seed(&mut config, seed);
    }
    let out = args
        .out
        .or_else(|| config.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let outcome = run(args.command, &config, &out)?;
    println!("{}", outcome.summary);
    for a in &outcome.artifacts {
        println!("wrote {}", a.display());
    }
    Ok(!outcome.failed)
}
