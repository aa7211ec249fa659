use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dess_core::config::RunConfig;
use dess_core::data::{features_to_string, generate_ratings, write_ratings, SyntheticRatings};
use dess_core::runner;

/// Dynamic embedding-size search for streaming recommenders.
#[derive(Parser, Debug)]
#[command(name = "dess", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// dess_cv | dess_fre | fixed | stationary_ablation | synthetic
    #[arg(long)]
    mode: Option<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a MovieLens-format ratings file and genre features.
    Generate {
        /// Directory for ratings.csv and features.tsv.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = 1700)]
        items: usize,
        #[arg(long, default_value_t = 100_000)]
        interactions: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(mode) = &cli.mode {
        cfg.set("mode", mode)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(Command::Generate { dir, users, items, interactions, seed }) = &cli.command {
        let spec = SyntheticRatings {
            users: *users,
            items: *items,
            interactions: *interactions,
            seed: *seed,
            ..Default::default()
        };
        let (stream, features) = generate_ratings(&spec)?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_ratings(&dir.join("ratings.csv"), &stream)?;
        fs::write(dir.join("features.tsv"), features_to_string(&features))?;
        println!("wrote {} ratings and {} item features to {}", stream.len(), features.len(), dir.display());
        return Ok(());
    }

    let cfg = resolve(&cli)?;
    print!("{}", cfg.to_text());
    cfg.validate()?;
    if cli.dry_run {
        return Ok(());
    }
    let written = runner::run(&cfg)?;
    for f in &written.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
