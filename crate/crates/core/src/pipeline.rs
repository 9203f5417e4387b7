//! End-to-end commands: pretrain, probe, fine-tune, sweep and embed.
//! Each writes `run.json` into its output directory before heavy work.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::checkpoint::{file_sha256, load_model, save_trainer, Checkpoint, CheckpointHeader, Tensor, MODEL_FILE};
use crate::config::RunConfig;
use crate::data::{write_manifest, Dataset};
use crate::decoder::{mse_loss, ReconTarget};
use crate::encoder::Encoder;
use crate::error::{GcmaeError, Result};
use crate::eval::{evaluate, extract_features, fine_tune, probe_train, EvalReport, ProbeHead};
use crate::loss::LossReport;
use crate::nn::{Dropout, ParamTree};
use crate::parallel::Execution;
use crate::patching::{sample_mask, unpatchify, NormStats, PatchSeq};
use crate::tensor::Matrix;
use crate::training::{mask_seed, prepare_tiles, PreparedTile, Trainer};

pub const RUN_JSON: &str = "run.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const SWEEP_HEADER: &str = "ratio,probe_acc,probe_auc,ft_acc,ft_auc";

/// The ten mask ratios of the reference ablation table.
pub const DEFAULT_SWEEP_RATIOS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.75, 0.8, 0.9];

/// `git rev-parse HEAD` of the working directory, if available.
pub fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    git_revision: Option<String>,
    objective: &'a str,
    loss_mode: &'a str,
    pooling: &'a str,
    target_norm: &'a str,
    checkpoint: Option<String>,
    checkpoint_sha256: Option<String>,
    config: &'a RunConfig,
}

/// Writes `run.json` with the effective config and provenance.
pub fn write_run_json(dir: &Path, command: &str, cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let record = RunRecord {
        command,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        git_revision: git_revision(),
        objective: cfg.objective.as_str(),
        loss_mode: cfg.loss_mode.as_str(),
        pooling: cfg.encoder.pooling.as_str(),
        target_norm: cfg.target_norm.as_str(),
        checkpoint: checkpoint.map(|p| p.display().to_string()),
        checkpoint_sha256: checkpoint.map(file_sha256).transpose()?,
        config: cfg,
    };
    fs::write(dir.join(RUN_JSON), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    pub execution: Execution,
    /// Number of training tiles to render as reconstruction triptychs.
    pub dump_recon: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainSummary {
    pub steps: u64,
    pub epochs: u64,
    pub first_loss: Option<LossReport>,
    pub last_loss: Option<LossReport>,
    pub checkpoint: PathBuf,
}

/// Pretrains from scratch into `out`: `run.json`, `manifest.csv`,
/// `loss.csv` (one row per step), and `model.ckpt`/`bank.ckpt`
/// rewritten after every epoch.
pub fn pretrain(cfg: &RunConfig, out: &Path, opts: &PretrainOptions) -> Result<PretrainSummary> {
    cfg.validate()?;
    write_run_json(out, "pretrain", cfg, None)?;
    let data = Dataset::load(&cfg.data)?;
    write_manifest(&out.join("manifest.csv"), &data.manifest)?;
    let train = prepare_tiles(&data.train, &data.stats, cfg.encoder.patch_size, cfg.target_norm)?;
    let mut trainer = Trainer::new(cfg.clone(), train.len())?.with_execution(opts.execution);

    let mut csv = BufWriter::new(fs::File::create(out.join(LOSS_CSV))?);
    writeln!(csv, "{}", LossReport::CSV_HEADER)?;
    let mut first = None;
    let mut last = None;
    for epoch in 0..cfg.epochs {
        let mut io_err = None;
        trainer.run_epoch(&train, |r| {
            first.get_or_insert(*r);
            last = Some(*r);
            if let Err(e) = r.append_csv(&mut csv) {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        csv.flush()?;
        save_trainer(out, &trainer, &data.stats)?;
        if let Some(r) = last {
            info!("epoch {epoch}: step {} total {:.5} mse {:.5} nce {:.5}", r.step, r.total, r.l_mse, r.l_nce);
        }
    }
    if cfg.epochs == 0 {
        save_trainer(out, &trainer, &data.stats)?;
    }
    if opts.dump_recon > 0 {
        dump_reconstructions(&trainer, &train, &data.stats, &out.join("recon"), opts.dump_recon)?;
    }
    Ok(PretrainSummary {
        steps: trainer.step,
        epochs: trainer.epoch,
        first_loss: first,
        last_loss: last,
        checkpoint: out.join(MODEL_FILE),
    })
}

fn to_pixels(seq: &PatchSeq, stats: &NormStats) -> Result<Vec<u8>> {
    let t = unpatchify(seq)?;
    let c = stats.channels();
    Ok(t.pixels
        .iter()
        .enumerate()
        .map(|(i, v)| ((v * stats.std[i % c] + stats.mean[i % c]).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

/// Writes `recon/tile-<id>.png`: masked input, reconstruction with visible
/// patches pasted back, and the original, side by side.
fn dump_reconstructions(trainer: &Trainer, tiles: &[PreparedTile], stats: &NormStats, dir: &Path, count: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let enc = &trainer.model.encoder;
    let size = enc.config.tile_size;
    let c = enc.config.channels;
    let epoch = trainer.epoch.saturating_sub(1);
    for tile in tiles.iter().take(count) {
        let plan = sample_mask(enc.config.n_patches(), trainer.config.mask_ratio, mask_seed(trainer.config.seed, epoch, tile.id))?;
        let (out, _) = enc.forward(&tile.input, &plan, &mut Dropout::disabled())?;
        let (recon, _, _) = trainer.model.decoder.forward(&out.latents, &plan)?;
        let mut masked = tile.input.clone();
        let mut pasted = tile.input.clone();
        for &m in &plan.masked {
            for (i, v) in masked.patches.row_mut(m).iter_mut().enumerate() {
                *v = (0.5 - stats.mean[i % c]) / stats.std[i % c];
            }
            pasted.patches.row_mut(m).copy_from_slice(recon.row(m));
        }
        let panels = [to_pixels(&masked, stats)?, to_pixels(&pasted, stats)?, to_pixels(&tile.input, stats)?];
        let width = 3 * size;
        let mut buf = vec![0u8; width * size * c];
        for (p, panel) in panels.iter().enumerate() {
            for y in 0..size {
                let dst = (y * width + p * size) * c;
                buf[dst..dst + size * c].copy_from_slice(&panel[y * size * c..(y + 1) * size * c]);
            }
        }
        let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
        let path = dir.join(format!("tile-{}.png", tile.id));
        image::save_buffer(&path, &buf, width as u32, size as u32, color).map_err(|e| GcmaeError::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

/// Mean masked-patch MSE of `trainer`'s model on `tiles` with epoch-0 masks.
pub fn reconstruction_mse(trainer: &Trainer, tiles: &[PreparedTile]) -> Result<f64> {
    let enc = &trainer.model.encoder;
    let mut sum = 0.0;
    for tile in tiles {
        let plan = sample_mask(enc.config.n_patches(), trainer.config.mask_ratio, mask_seed(trainer.config.seed, 0, tile.id))?;
        let (out, _) = enc.forward(&tile.input, &plan, &mut Dropout::disabled())?;
        let (recon, _, _) = trainer.model.decoder.forward(&out.latents, &plan)?;
        let target = ReconTarget {
            patches: tile.target.clone(),
            mode: trainer.config.loss_mode,
        };
        sum += mse_loss(&recon, &target, &plan)?;
    }
    Ok(sum / tiles.len().max(1) as f64)
}

/// Evaluation data prepared with the checkpoint's normalization stats.
struct EvalData {
    dataset: Dataset,
    train: Vec<PreparedTile>,
    test: Vec<PreparedTile>,
}

fn check_fit(cfg: &RunConfig, encoder: &Encoder) -> Result<()> {
    let e = &encoder.config;
    if cfg.data.tile_size != e.tile_size || cfg.data.channels != e.channels {
        return Err(GcmaeError::shape(format!(
            "dataset tiles {}px x{} do not fit encoder input {}px x{}",
            cfg.data.tile_size, cfg.data.channels, e.tile_size, e.channels
        )));
    }
    Ok(())
}

fn load_eval_data(cfg: &RunConfig, encoder: &Encoder, stats: &NormStats) -> Result<EvalData> {
    check_fit(cfg, encoder)?;
    let dataset = Dataset::load(&cfg.data)?;
    let p = encoder.config.patch_size;
    let train = prepare_tiles(&dataset.train, stats, p, cfg.target_norm)?;
    let test = prepare_tiles(&dataset.test, stats, p, cfg.target_norm)?;
    Ok(EvalData { dataset, train, test })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRecord {
    pub report: EvalReport,
    pub probe_epochs: usize,
    pub probe_plateau: bool,
    pub n_labeled: usize,
    /// Probe metrics when this record is for fine-tuning.
    pub probe_accuracy: Option<f64>,
    pub probe_auc: Option<f64>,
    pub finetune_epochs: Option<usize>,
}

fn write_eval(out: &Path, record: &EvalRecord) -> Result<()> {
    fs::write(out.join(EVAL_JSON), serde_json::to_string_pretty(record)?)?;
    Ok(())
}

struct Probed {
    encoder: Encoder,
    header: CheckpointHeader,
    data: EvalData,
    head: ProbeHead,
    record: EvalRecord,
    selected: Vec<usize>,
}

fn run_probe(checkpoint: &Path, cfg: &RunConfig, out: &Path, exec: Execution) -> Result<Probed> {
    cfg.probe.validate()?;
    let (model, header) = load_model(checkpoint)?;
    let encoder = model.encoder;
    let data = load_eval_data(cfg, &encoder, &header.norm_stats)?;
    if data.test.is_empty() {
        return Err(GcmaeError::Empty("test split".into()));
    }
    let outcome = probe_train(&encoder, &data.train, data.dataset.classes, &cfg.probe, exec)?;
    let train_entries: Vec<_> = data
        .dataset
        .manifest
        .iter()
        .filter(|e| e.split == crate::data::Split::Train)
        .collect();
    let subset: Vec<_> = outcome.selected.iter().map(|&i| train_entries[i].clone()).collect();
    write_manifest(&out.join("probe_manifest.csv"), &subset)?;
    let (acc, auc) = evaluate(&encoder, &outcome.fit.head, &data.test, exec)?;
    let report = EvalReport {
        accuracy: acc,
        auc,
        n_eval: data.test.len(),
        label_fraction: cfg.probe.fraction,
        split_seed: cfg.probe.seed,
        mode: "probe".into(),
        pretrain_mask_ratio: Some(header.config.mask_ratio),
        pretrain_checkpoint_sha256: Some(file_sha256(checkpoint)?),
    };
    fs::write(out.join("probe_head.json"), serde_json::to_string(&outcome.fit.head)?)?;
    Ok(Probed {
        record: EvalRecord {
            report,
            probe_epochs: outcome.fit.epochs_run,
            probe_plateau: outcome.fit.stopped_on_plateau,
            n_labeled: outcome.selected.len(),
            probe_accuracy: None,
            probe_auc: None,
            finetune_epochs: None,
        },
        encoder,
        header,
        data,
        head: outcome.fit.head,
        selected: outcome.selected,
    })
}

/// Linear probe of a pretrained checkpoint; writes `eval.json`,
/// `probe_manifest.csv` and `probe_head.json`.
pub fn probe(checkpoint: &Path, cfg: &RunConfig, out: &Path, exec: Execution) -> Result<EvalRecord> {
    write_run_json(out, "probe", cfg, Some(checkpoint))?;
    let p = run_probe(checkpoint, cfg, out, exec)?;
    write_eval(out, &p.record)?;
    Ok(p.record)
}

/// Probe, then fine-tune encoder and head from the probe's head. Writes
/// `eval.json` and `finetuned.ckpt`.
pub fn finetune(checkpoint: &Path, cfg: &RunConfig, out: &Path, exec: Execution) -> Result<EvalRecord> {
    write_run_json(out, "finetune", cfg, Some(checkpoint))?;
    let p = run_probe(checkpoint, cfg, out, exec)?;
    let subset: Vec<PreparedTile> = p.selected.iter().map(|&i| p.data.train[i].clone()).collect();
    let (encoder, head) = fine_tune(&p.encoder, &p.head, &subset, &cfg.finetune, cfg.probe.seed, exec)?;
    let (acc, auc) = evaluate(&encoder, &head, &p.data.test, exec)?;

    let mut tensors: std::collections::BTreeMap<String, Tensor> = encoder
        .params
        .named()
        .into_iter()
        .map(|(n, m)| (format!("encoder.{n}"), Tensor::from_matrix(m)))
        .collect();
    let lin = head.linear();
    tensors.insert("head.weight".into(), Tensor::from_matrix(&lin.weight));
    tensors.insert("head.bias".into(), Tensor::from_matrix(&lin.bias));
    let header = CheckpointHeader {
        kind: "classifier".into(),
        extra: serde_json::to_value(&head)?,
        ..p.header.clone()
    };
    Checkpoint { header, tensors }.save(&out.join("finetuned.ckpt"))?;

    let record = EvalRecord {
        report: EvalReport {
            accuracy: acc,
            auc,
            mode: "finetune".into(),
            ..p.record.report.clone()
        },
        probe_accuracy: Some(p.record.report.accuracy),
        probe_auc: Some(p.record.report.auc),
        finetune_epochs: Some(cfg.finetune.epochs),
        ..p.record
    };
    write_eval(out, &record)?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub probe_acc: f64,
    pub probe_auc: f64,
    pub ft_acc: f64,
    pub ft_auc: f64,
}

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4}",
            self.ratio, self.probe_acc, self.probe_auc, self.ft_acc, self.ft_auc
        )
    }
}

fn ratio_dir(out: &Path, ratio: f64) -> PathBuf {
    out.join(format!("ratio-{ratio}"))
}

fn sweep_one(cfg: &RunConfig, ratio: f64, out: &Path, exec: Execution) -> Result<SweepRow> {
    let mut c = cfg.clone();
    c.mask_ratio = ratio;
    let dir = ratio_dir(out, ratio);
    pretrain(
        &c,
        &dir.join("pretrain"),
        &PretrainOptions {
            execution: exec,
            dump_recon: 0,
        },
    )?;
    let ft = finetune(&dir.join("pretrain").join(MODEL_FILE), &c, &dir.join("eval"), exec)?;
    Ok(SweepRow {
        ratio,
        probe_acc: ft.probe_accuracy.unwrap_or(f64::NAN),
        probe_auc: ft.probe_auc.unwrap_or(f64::NAN),
        ft_acc: ft.report.accuracy,
        ft_auc: ft.report.auc,
    })
}

/// Independent pretraining + probe + fine-tune per mask ratio, all with the
/// same seeds. Writes `sweep.csv`; on failure the rows before the first
/// failing ratio are kept and a `FAILED` marker row follows them.
pub fn sweep(cfg: &RunConfig, ratios: &[f64], out: &Path, jobs: usize, exec: Execution) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() {
        return Err(GcmaeError::Empty("ratio list".into()));
    }
    if let Some(&r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(GcmaeError::RatioOutOfRange(r));
    }
    write_run_json(out, "sweep", cfg, None)?;
    let jobs = jobs.max(1).min(ratios.len());
    let results: Vec<Result<SweepRow>> = if jobs == 1 {
        ratios.iter().map(|&r| sweep_one(cfg, r, out, exec)).collect()
    } else {
        let mut slots: Vec<Option<Result<SweepRow>>> = (0..ratios.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let chunks: Vec<_> = slots.chunks_mut(ratios.len().div_ceil(jobs)).enumerate().collect();
            let width = ratios.len().div_ceil(jobs);
            for (j, chunk) in chunks {
                s.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(sweep_one(cfg, ratios[j * width + k], out, Execution::Sequential));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every ratio ran")).collect()
    };

    let mut csv = BufWriter::new(fs::File::create(out.join(SWEEP_CSV))?);
    writeln!(csv, "{SWEEP_HEADER}")?;
    let mut rows = Vec::new();
    for (r, res) in ratios.iter().zip(results) {
        match res {
            Ok(row) => {
                writeln!(csv, "{}", row.csv())?;
                rows.push(row);
            }
            Err(e) => {
                writeln!(csv, "{r},FAILED,FAILED,FAILED,FAILED")?;
                csv.flush()?;
                return Err(e);
            }
        }
    }
    csv.flush()?;
    Ok(rows)
}

/// Writes `embeddings.csv`: `id,label,f0..f{D-1}` for every train then
/// test tile, where `id` is the manifest id.
pub fn embed(checkpoint: &Path, cfg: &RunConfig, out: &Path, exec: Execution) -> Result<usize> {
    write_run_json(out, "embed", cfg, Some(checkpoint))?;
    let (model, header) = load_model(checkpoint)?;
    let encoder = model.encoder;
    let data = load_eval_data(cfg, &encoder, &header.norm_stats)?;
    let d = encoder.config.dim;
    let mut f = BufWriter::new(fs::File::create(out.join(EMBEDDINGS_CSV))?);
    let cols: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    writeln!(f, "id,label,{}", cols.join(","))?;
    let mut rows = 0;
    let n_train = data.train.len();
    for (offset, tiles) in [(0, &data.train), (n_train, &data.test)] {
        let feats: Matrix = extract_features(&encoder, tiles, exec)?;
        for (i, t) in tiles.iter().enumerate() {
            let label = t.label.map(|l| l.to_string()).unwrap_or_default();
            let vals: Vec<String> = feats.row(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(f, "{},{},{}", offset + t.id, label, vals.join(","))?;
            rows += 1;
        }
    }
    f.flush()?;
    Ok(rows)
}
