//! `gcmae`: pretraining, probing, fine-tuning, mask-ratio sweeps and
//! embedding export.
//!
//! ```sh
//! gcmae pretrain --config toy.cfg --out runs/toy
//! gcmae probe --checkpoint runs/toy/model.ckpt --fraction 0.1 --out runs/toy/probe
//! gcmae sweep --config toy.cfg --jobs 2 --out runs/sweep
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gcmae::checkpoint::Checkpoint;
use gcmae::pipeline::{self, PretrainOptions, DEFAULT_SWEEP_RATIOS};
use gcmae::{Execution, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "gcmae", version, about = "Masked autoencoder + memory-bank contrastive pretraining for tile images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain an encoder/decoder from scratch.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Write reconstruction triptychs for the first tiles.
        #[arg(long)]
        dump_recon: bool,
        /// How many tiles `--dump-recon` renders.
        #[arg(long, default_value_t = 8)]
        recon_count: usize,
    },
    /// Train a linear head on frozen features and evaluate it.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Probe, then train encoder and head together.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Pretrain, probe and fine-tune once per mask ratio.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated mask ratios.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_RATIOS.to_vec())]
        ratios: Vec<f64>,
        /// Ratios run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Export pooled features of every tile as CSV.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Run seed (also seeds the probe subsample).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Weight of the contrastive term; 0 trains plain reconstruction.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Labeled fraction used by probe and fine-tune.
    #[arg(long)]
    fraction: Option<f64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Disable data-parallel batch processing.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    /// Config file (or `base`), then flags; flags win.
    fn effective(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))?,
            (None, Some(b)) => b,
            (None, None) => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.probe.seed = s;
        }
        if let Some(r) = self.mask_ratio {
            cfg.mask_ratio = r;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(l) = self.lambda2 {
            cfg.lambda2 = l;
        }
        if let Some(f) = self.fraction {
            cfg.probe.fraction = f;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got '{kv}'");
            };
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    Ok(Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .header
        .config)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain {
            common,
            dump_recon,
            recon_count,
        } => {
            let cfg = common.effective(None)?;
            let opts = PretrainOptions {
                execution: common.execution(),
                dump_recon: if dump_recon { recon_count } else { 0 },
            };
            let s = pipeline::pretrain(&cfg, &common.out, &opts)?;
            if let (Some(a), Some(b)) = (s.first_loss, s.last_loss) {
                println!("steps {}  loss {:.5} -> {:.5}  (mse {:.5} -> {:.5})", s.steps, a.total, b.total, a.l_mse, b.l_mse);
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Probe { common, checkpoint } => {
            let cfg = common.effective(Some(checkpoint_config(&checkpoint)?))?;
            let r = pipeline::probe(&checkpoint, &cfg, &common.out, common.execution())?;
            println!(
                "probe  acc {:.2}%  auc {:.2}%  labeled {}  eval {}",
                r.report.accuracy, r.report.auc, r.n_labeled, r.report.n_eval
            );
        }
        Command::Finetune { common, checkpoint } => {
            let cfg = common.effective(Some(checkpoint_config(&checkpoint)?))?;
            let r = pipeline::finetune(&checkpoint, &cfg, &common.out, common.execution())?;
            println!(
                "probe  acc {:.2}%  auc {:.2}%\nfinetune  acc {:.2}%  auc {:.2}%",
                r.probe_accuracy.unwrap_or(f64::NAN),
                r.probe_auc.unwrap_or(f64::NAN),
                r.report.accuracy,
                r.report.auc
            );
        }
        Command::Sweep { common, ratios, jobs } => {
            let cfg = common.effective(None)?;
            let rows = pipeline::sweep(&cfg, &ratios, &common.out, jobs, common.execution())?;
            println!("{}", pipeline::SWEEP_HEADER);
            for row in rows {
                println!("{}", row.csv());
            }
        }
        Command::Embed { common, checkpoint } => {
            let cfg = common.effective(Some(checkpoint_config(&checkpoint)?))?;
            let n = pipeline::embed(&checkpoint, &cfg, &common.out, common.execution())?;
            println!("wrote {n} rows to {}", common.out.join(pipeline::EMBEDDINGS_CSV).display());
        }
    }
    Ok(())
}
