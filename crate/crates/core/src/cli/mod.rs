//! Command-line driver: run configuration, checkpoints and the pipeline
//! commands.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::denoiser::PriorMode;
use crate::diffusion::SamplerMode;
use crate::error::Result;

pub use checkpoint::Checkpoint;
pub use commands::*;
pub use config::{PathsConfig, PriorsConfig, RunConfig, TrainConfig, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "plate-restore",
    version,
    about = "Character-guided diffusion restoration of license plates"
)]
pub struct Cli {
    /// Run configuration (TOML). Falls back to $PLATE_RESTORE_CONFIG, then
    /// the built-in desk profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render high-quality plates and the split manifests.
    GenDataset {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize a low-quality image for every manifest record.
    Degrade {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the denoiser; writes model.chdf and loss.jsonl.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        prior_mode: Option<PriorMode>,
    },
    /// Restore a manifest's low-quality images, or a single image.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<SamplerMode>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write per-character attention heatmaps under <out>/attn.
        #[arg(long)]
        dump_attn: bool,
        #[arg(long)]
        prior_mode: Option<PriorMode>,
    },
    /// Score restored images against a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        restored: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and score all four prior variants for each seed.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        work: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Executes one parsed command, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::GenDataset { out, count, seed } => {
            if let Some(c) = count {
                cfg.plates.count = c;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let s = cmd_gen_dataset(&cfg, &out)?;
            println!(
                "{} train, {} val, {} test plates in {}",
                s.train.len(),
                s.val.len(),
                s.test.len(),
                out.display()
            );
        }
        Command::Degrade { data, seed } => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let n = cmd_degrade(&cfg, &data)?;
            println!("{n} low-quality images in {}", data.join("lq").display());
        }
        Command::Train {
            data,
            out,
            steps,
            seed,
            prior_mode,
        } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(m) = prior_mode {
                cfg.model.prior_mode = m;
            }
            let data = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let out = out.unwrap_or_else(|| cfg.paths.run_dir.clone());
            let s = cmd_train(&cfg, &data, &out)?;
            println!(
                "{} steps, final loss {}, checkpoint {}",
                s.steps,
                s.final_loss.map_or("-".into(), |l| format!("{l:.5}")),
                s.checkpoint.display()
            );
        }
        Command::Restore {
            checkpoint,
            input,
            out,
            mode,
            seed,
            dump_attn,
            prior_mode,
        } => {
            let written = cmd_restore(&RestoreOptions {
                checkpoint,
                input,
                out_dir: out.clone(),
                mode,
                seed,
                dump_attn,
                prior_mode,
            })?;
            println!("{} restored images in {}", written.len(), out.display());
        }
        Command::Evaluate {
            manifest,
            restored,
            report,
        } => {
            let report = report.unwrap_or_else(|| restored.join("report.jsonl"));
            let r = cmd_evaluate(&cfg, &manifest, &restored, &report)?;
            print!("{}", r.table());
        }
        Command::Ablate { seeds, work, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let work = work.unwrap_or_else(|| cfg.paths.run_dir.join("ablation"));
            let r = cmd_ablate(&cfg, &seeds, &work)?;
            print!("{}", r.table());
        }
    }
    Ok(())
}
