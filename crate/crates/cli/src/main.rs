use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fsar_core::data::{save_embedding_file, synth_dataset, Split, SynthConfig};
use fsar_core::train::{
    build_model, evaluate, init_params, load_checkpoint, load_dataset, param_census, run_training, RunConfig,
};

#[derive(Parser)]
#[command(name = "fsar", version, about = "Few-shot video recognition with adapter-tuned frozen encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config and write a checkpoint, log and config echo.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line every N episodes (0 disables).
        #[arg(long, default_value_t = 100)]
        every: usize,
    },
    /// Evaluate a checkpoint on test-split episodes.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `episodes_eval`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Print the full report as JSON on stdout.
        #[arg(long)]
        json: bool,
        /// Directory for `eval_report.json` and `eval_episodes.csv`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Count parameters by group.
    Census {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic embedding file and its class sidecar.
    GenData {
        #[arg(long, default_value_t = 100)]
        classes: usize,
        #[arg(long, default_value_t = 6)]
        videos: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &PathBuf) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out, every } => {
            let cfg = read_config(&config)?;
            let total = cfg.episodes_train;
            run_training(&cfg, &out, |s| {
                if every > 0 && (s.episode % every == 0 || s.episode + 1 == total) {
                    eprintln!(
                        "episode {:>6}/{total}  lr {:.2e}  loss {:.4}  acc {:.3}",
                        s.episode + 1,
                        s.lr,
                        s.loss,
                        s.accuracy
                    );
                }
            })?;
            println!("wrote {}", out.join("checkpoint.fsck").display());
        }
        Command::Eval { config, checkpoint, episodes, json, report, split } => {
            let cfg = read_config(&config)?;
            let manifest = load_dataset(&cfg)?;
            let model = build_model(&cfg, &manifest)?;
            let mut reg = init_params(&cfg, &model)?;
            load_checkpoint(&checkpoint, &mut reg).with_context(|| format!("loading {}", checkpoint.display()))?;
            let r = evaluate(&cfg, &manifest, &model, &reg, split, episodes.unwrap_or(cfg.episodes_eval))?;
            if let Some(dir) = report {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("eval_report.json"), r.to_json())?;
                fs::write(dir.join("eval_episodes.csv"), r.to_csv())?;
            }
            if json {
                println!("{}", r.to_json());
            } else {
                println!(
                    "{} episodes on {}: accuracy {:.4} +- {:.4}",
                    r.episodes, r.split, r.mean_accuracy, r.ci95
                );
            }
        }
        Command::Census { config, json } => {
            let cfg = read_config(&config)?;
            let manifest = load_dataset(&cfg)?;
            let grid = manifest.grid().context("dataset has no videos")?;
            let c = param_census(&cfg.backbone_for(grid)?, cfg.options)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&c)?);
            } else {
                println!("{:<14} {:>14} {:>14}", "group", "total", "tunable");
                for g in &c.groups {
                    println!("{:<14} {:>14} {:>14}", g.group, g.total, g.tunable);
                }
                println!("{:<14} {:>14} {:>14}", "all", c.total, c.tunable);
                println!("tunable ratio {:.4}", c.ratio());
            }
        }
        Command::GenData { classes, videos, frames, seed, noise, out } => {
            let cfg = SynthConfig { classes, videos_per_class: videos, frames, seed, noise, ..SynthConfig::default() };
            let manifest = synth_dataset(&cfg)?;
            save_embedding_file(&out, &manifest)?;
            println!("wrote {} videos of {} classes to {}", manifest.records().len(), classes, out.display());
        }
    }
    Ok(())
}
