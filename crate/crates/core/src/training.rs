//! Pretraining: the joint reconstruction + contrastive objective, the
//! optimizer loop, and model-level gradient verification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::{mse_loss_grad, Decoder, LossMode, ReconTarget};
use crate::encoder::{Encoder, EncoderCache, EncoderOutput, TileFeature};
use crate::error::{GcmaeError, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::loss::{combined_loss, LossReport};
use crate::membank::{init_bank, info_nce_grad, momentum_update, sample_negatives, ContrastBatch, MemoryBank};
use crate::nn::{join, Dropout, ParamTree};
use crate::optim::{optimizer_step, OptimState};
use crate::parallel::Execution;
use crate::patching::{normalize_target, normalize_tile, patchify, sample_mask, MaskPlan, NormStats, PatchSeq, TargetNorm, Tile};
use crate::rng;
use crate::tensor::Matrix;

/// Which proxy tasks drive training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Reconstruction plus memory-bank contrast.
    #[default]
    Gcmae,
    /// Reconstruction only; no memory bank is built.
    Mae,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Gcmae => "gcmae",
            Objective::Mae => "mae",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = GcmaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcmae" => Ok(Objective::Gcmae),
            "mae" => Ok(Objective::Mae),
            other => Err(GcmaeError::Config(format!("unknown objective '{other}'"))),
        }
    }
}

/// Learning-rate schedule over optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear warmup from 0 then half-cosine decay to `min_lr`.
    WarmupCosine { warmup_epochs: f64, min_lr: f64 },
}

impl Schedule {
    pub fn lr_at(&self, base_lr: f64, step: u64, steps_per_epoch: usize, total_epochs: usize) -> f64 {
        match *self {
            Schedule::Constant => base_lr,
            Schedule::WarmupCosine { warmup_epochs, min_lr } => {
                let epoch = step as f64 / steps_per_epoch.max(1) as f64;
                if epoch < warmup_epochs {
                    base_lr * epoch / warmup_epochs
                } else {
                    let span = (total_epochs as f64 - warmup_epochs).max(1e-12);
                    let progress = ((epoch - warmup_epochs) / span).min(1.0);
                    min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

/// A tile ready for the model: dataset-normalized input patches and the
/// reconstruction target.
#[derive(Clone, Debug)]
pub struct PreparedTile {
    pub id: usize,
    pub label: Option<usize>,
    pub input: PatchSeq,
    pub target: Matrix,
}

pub fn prepare_tiles(tiles: &[Tile], stats: &NormStats, patch_size: usize, target_norm: TargetNorm) -> Result<Vec<PreparedTile>> {
    tiles
        .iter()
        .map(|t| {
            let input = patchify(&normalize_tile(t, stats)?, patch_size)?;
            let target = match target_norm {
                TargetNorm::DatasetNorm => input.patches.clone(),
                TargetNorm::PerPatchNorm => normalize_target(t, patch_size, target_norm, stats)?.patches,
            };
            Ok(PreparedTile {
                id: t.id,
                label: t.label,
                input,
                target,
            })
        })
        .collect()
}

/// Encoder and decoder as one parameter tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Gcmae {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl ParamTree for Gcmae {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.encoder.params.visit(&join(prefix, "encoder"), f);
        self.decoder.params.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.encoder.params.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.params.visit_mut(&join(prefix, "decoder"), f);
    }
}

impl Gcmae {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut r = rng::stream(cfg.seed, "init", 0);
        let encoder = Encoder::new(cfg.encoder.clone(), &mut r)?;
        let e = &encoder.config;
        let decoder = Decoder::new(cfg.decoder.clone(), e.dim, e.n_patches(), e.patch_dim(), &mut r)?;
        Ok(Self { encoder, decoder })
    }
}

/// Loss hyperparameters of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    pub loss_mode: LossMode,
}

/// Everything random about one step, fixed up front so the objective is a
/// deterministic function of the parameters.
pub struct StepBatch<'a> {
    pub tiles: Vec<&'a PreparedTile>,
    pub plans: Vec<MaskPlan>,
    /// Dropout stream seeds, one per tile (unused when dropout is 0).
    pub dropout_seeds: Vec<u64>,
    /// `(positive keys, negatives)`; `None` for reconstruction only.
    pub contrast: Option<(Matrix, Matrix)>,
}

pub struct StepOutcome {
    pub l_mse: f64,
    pub l_nce: f64,
    pub total: f64,
    /// Unit-norm query features, one row per tile.
    pub features: Matrix,
    pub grads: Option<Gcmae>,
}

struct Forward {
    output: EncoderOutput,
    cache: EncoderCache,
    feature: TileFeature,
}

fn dropout_for(model: &Gcmae, seed: u64) -> Dropout {
    let rate = model.encoder.config.dropout;
    if rate > 0.0 {
        Dropout::train(rate, rng::stream(seed, "dropout", 0))
    } else {
        Dropout::disabled()
    }
}

/// Evaluates `λ₁·L_MSE + λ₂·L_NCE` over a batch and, if requested, its
/// gradient w.r.t. every model parameter.
pub fn step_objective(model: &Gcmae, batch: &StepBatch<'_>, spec: &LossSpec, exec: Execution, want_grads: bool) -> Result<StepOutcome> {
    let b = batch.tiles.len();
    if b == 0 || batch.plans.len() != b || batch.dropout_seeds.len() != b {
        return Err(GcmaeError::shape("step batch tiles/plans/seeds disagree or are empty"));
    }

    let forwards: Vec<Result<Forward>> = exec.map(b, |i| {
        let mut drop = dropout_for(model, batch.dropout_seeds[i]);
        let (output, cache) = model.encoder.forward(&batch.tiles[i].input, &batch.plans[i], &mut drop)?;
        let feature = model.encoder.feature(&output)?;
        Ok(Forward { output, cache, feature })
    });
    let forwards: Vec<Forward> = forwards.into_iter().collect::<Result<_>>()?;
    let d = model.encoder.config.dim;
    let mut features = Matrix::zeros(b, d);
    for (i, f) in forwards.iter().enumerate() {
        features.row_mut(i).copy_from_slice(f.feature.as_slice());
    }

    let (l_nce, d_queries) = match &batch.contrast {
        Some((keys, negatives)) => {
            let cb = ContrastBatch {
                queries: features.clone(),
                keys: keys.clone(),
                negatives: negatives.clone(),
                temperature: spec.temperature,
            };
            let (l, g) = info_nce_grad(&cb)?;
            (l, Some(g))
        }
        None => (0.0, None),
    };

    let mse_scale = spec.lambda1 / b as f64;
    let per_tile = |i: usize| -> Result<(f64, Option<Gcmae>)> {
        let tile = batch.tiles[i];
        let plan = &batch.plans[i];
        let fw = &forwards[i];
        let (recon, ac, dc) = model.decoder.forward(&fw.output.latents, plan)?;
        let target = ReconTarget {
            patches: tile.target.clone(),
            mode: spec.loss_mode,
        };
        let (mse, mut d_recon) = mse_loss_grad(&recon, &target, plan)?;
        if !want_grads {
            return Ok((mse, None));
        }
        d_recon.scale(mse_scale);
        let mut grads = model.zeros_like();
        let mut d_lat = model.decoder.backward(&ac, &dc, &d_recon, &mut grads.decoder.params);
        let mut d_cls = None;
        if let Some(dq) = &d_queries {
            let scaled: Vec<f64> = dq.row(i).iter().map(|v| spec.lambda2 * v).collect();
            let (dl, dc) = model.encoder.feature_backward(&fw.output, &scaled);
            d_lat.add_assign(&dl);
            d_cls = dc;
        }
        model.encoder.backward(&fw.cache, &d_lat, d_cls.as_deref(), &mut grads.encoder.params);
        Ok((mse, Some(grads)))
    };
    let reduced = exec
        .map_reduce(b, per_tile, |acc, next| {
            if acc.is_err() {
                return;
            }
            match next {
                Err(e) => *acc = Err(e),
                Ok((mse, g)) => {
                    let (sum, grads) = acc.as_mut().expect("checked above");
                    *sum += mse;
                    if let (Some(a), Some(g)) = (grads.as_mut(), g) {
                        a.tree_add(&g);
                    }
                }
            }
        })
        .expect("non-empty batch")?;
    let (mse_sum, grads) = reduced;
    let l_mse = mse_sum / b as f64;
    let total = spec.lambda1 * l_mse + if batch.contrast.is_some() { spec.lambda2 * l_nce } else { 0.0 };
    Ok(StepOutcome {
        l_mse,
        l_nce,
        total,
        features,
        grads,
    })
}

/// Names of parameter tensors whose gradient is identically zero.
pub fn zero_gradient_census(grads: &Gcmae) -> Vec<String> {
    grads
        .named()
        .into_iter()
        .filter(|(_, m)| m.as_slice().iter().all(|&v| v == 0.0))
        .map(|(n, _)| n)
        .collect()
}

/// Result of a model-level finite-difference check.
#[derive(Clone, Debug, Serialize)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub worst_parameter: Option<String>,
    pub parameter_count: usize,
}

fn locate(model: &Gcmae, flat_index: usize) -> String {
    let mut off = 0;
    for (name, m) in model.named() {
        if flat_index < off + m.len() {
            let local = flat_index - off;
            return format!("{name}[{},{}]", local / m.cols(), local % m.cols());
        }
        off += m.len();
    }
    "out of range".into()
}

/// Checks the analytic gradient of the full objective against central
/// differences, for every parameter (or the given flat indices).
pub fn model_grad_check(model: &Gcmae, batch: &StepBatch<'_>, spec: &LossSpec, eps: f64, indices: Option<&[usize]>) -> Result<ModelGradCheck> {
    let outcome = step_objective(model, batch, spec, Execution::Sequential, true)?;
    let analytic = outcome.grads.expect("gradients requested").flatten();
    let point = model.flatten();
    let mut probe = model.clone();
    let report = grad_check(
        |x| {
            probe.unflatten(x);
            step_objective(&probe, batch, spec, Execution::Sequential, false)
                .map(|o| o.total)
                .unwrap_or(f64::NAN)
        },
        &point,
        &analytic,
        eps,
        indices,
    )?;
    Ok(ModelGradCheck {
        worst_parameter: report.worst_index.map(|i| locate(model, i)),
        parameter_count: point.len(),
        report,
    })
}

pub fn mask_seed(run_seed: u64, epoch: u64, tile_id: usize) -> u64 {
    rng::derive(rng::derive(run_seed, "mask", epoch), "tile", tile_id as u64)
}

fn dropout_seed(run_seed: u64, epoch: u64, tile_id: usize) -> u64 {
    rng::derive(rng::derive(run_seed, "dropout", epoch), "tile", tile_id as u64)
}

/// Owns the model, optimizer state and memory bank for one pretraining run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Gcmae,
    pub optim: OptimState,
    pub bank: Option<MemoryBank>,
    /// Epoch the next step belongs to.
    pub epoch: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub n_samples: usize,
    pub execution: Execution,
}

impl Trainer {
    pub fn new(config: RunConfig, n_samples: usize) -> Result<Self> {
        config.validate()?;
        if n_samples == 0 {
            return Err(GcmaeError::Empty("training set".into()));
        }
        let model = Gcmae::new(&config)?;
        let optim = OptimState::new(&model, config.optimizer);
        let bank = match config.objective {
            Objective::Gcmae => {
                let available = n_samples.saturating_sub(config.batch_size.min(n_samples));
                if config.negatives > available {
                    return Err(GcmaeError::TooManyNegatives {
                        requested: config.negatives,
                        available,
                    });
                }
                let mut bank = init_bank(n_samples, config.encoder.dim, rng::derive(config.seed, "bank", 0))?;
                bank.momentum = config.bank_momentum;
                Some(bank)
            }
            Objective::Mae => None,
        };
        Ok(Self {
            config,
            model,
            optim,
            bank,
            epoch: 0,
            step: 0,
            n_samples,
            execution: Execution::default(),
        })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            lambda1: self.config.lambda1,
            lambda2: self.config.lambda2,
            temperature: self.config.temperature,
            loss_mode: self.config.loss_mode,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_samples.div_ceil(self.config.batch_size)
    }

    /// Shuffled sample order for `epoch`, from its own stream.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        rng::permutation(self.n_samples, &mut rng::stream(self.config.seed, "order", epoch))
    }

    /// Batches of sample ids for `epoch`; the last batch may be short.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Fixes masks, dropout seeds and contrastive keys/negatives for a batch.
    pub fn build_batch<'a>(&self, data: &'a [PreparedTile], ids: &[usize]) -> Result<StepBatch<'a>> {
        let n = self.model.encoder.config.n_patches();
        let mut tiles = Vec::with_capacity(ids.len());
        let mut plans = Vec::with_capacity(ids.len());
        let mut dropout_seeds = Vec::with_capacity(ids.len());
        for &id in ids {
            let tile = data.get(id).ok_or(GcmaeError::IdOutOfRange { id, size: data.len() })?;
            if tile.id != id {
                return Err(GcmaeError::Dataset(format!("sample at index {id} carries id {}", tile.id)));
            }
            tiles.push(tile);
            plans.push(sample_mask(n, self.config.mask_ratio, mask_seed(self.config.seed, self.epoch, id))?);
            dropout_seeds.push(dropout_seed(self.config.seed, self.epoch, id));
        }
        let contrast = match &self.bank {
            Some(bank) => {
                let keys = bank.keys(ids)?;
                let mut stream = rng::stream(self.config.seed, "negatives", self.step);
                let negatives = sample_negatives(bank, self.config.negatives, ids, &mut stream)?;
                Some((keys, negatives))
            }
            None => None,
        };
        Ok(StepBatch {
            tiles,
            plans,
            dropout_seeds,
            contrast,
        })
    }

    /// One optimizer step on `ids`: objective, backprop, AdamW, then the
    /// bank update with the step's (detached) features.
    pub fn train_step(&mut self, data: &[PreparedTile], ids: &[usize]) -> Result<LossReport> {
        if data.len() != self.n_samples {
            return Err(GcmaeError::Dataset(format!(
                "trainer built for {} samples, got {}",
                self.n_samples,
                data.len()
            )));
        }
        let batch = self.build_batch(data, ids)?;
        let spec = self.loss_spec();
        let outcome = step_objective(&self.model, &batch, &spec, self.execution, true)?;
        let lambda2 = if self.bank.is_some() { spec.lambda2 } else { 0.0 };
        let report = combined_loss(outcome.l_mse, outcome.l_nce, spec.lambda1, lambda2)?.with_step(self.step);
        let grads = outcome.grads.expect("gradients requested");
        self.optim.lr = self.config.schedule.lr_at(
            self.config.optimizer.lr,
            self.step,
            self.steps_per_epoch(),
            self.config.epochs,
        );
        optimizer_step(&mut self.model, &grads, &mut self.optim)?;
        if let Some(bank) = self.bank.as_mut() {
            momentum_update(bank, ids, &outcome.features, self.epoch)?;
        }
        self.step += 1;
        Ok(report)
    }

    /// Runs every batch of the current epoch, then advances the epoch counter.
    pub fn run_epoch<F: FnMut(&LossReport)>(&mut self, data: &[PreparedTile], mut on_step: F) -> Result<()> {
        for ids in self.epoch_batches(self.epoch) {
            let report = self.train_step(data, &ids)?;
            on_step(&report);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Named tensors of the full training state, for checkpointing.
    pub fn state_tensors(&self) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        for (name, m) in self.model.named() {
            out.insert(name, m.clone());
        }
        for (i, name) in self.optim.names.iter().enumerate() {
            let len = self.optim.first[i].len();
            out.insert(format!("optim.m.{name}"), Matrix::from_vec(1, len, self.optim.first[i].clone()));
            out.insert(format!("optim.v.{name}"), Matrix::from_vec(1, len, self.optim.second[i].clone()));
        }
        out
    }

    /// Restores model and optimizer moments from named tensors.
    pub fn load_state_tensors(&mut self, tensors: &BTreeMap<String, Matrix>) -> Result<()> {
        let mut missing = None;
        self.model.visit_mut("", &mut |name, m| match tensors.get(&name) {
            Some(t) if t.shape() == m.shape() => m.as_mut_slice().copy_from_slice(t.as_slice()),
            _ => missing = missing.take().or(Some(name)),
        });
        if let Some(name) = missing {
            return Err(GcmaeError::Checkpoint(format!("missing or misshapen tensor {name}")));
        }
        for (i, name) in self.optim.names.iter().enumerate() {
            for (prefix, store) in [("optim.m.", &mut self.optim.first[i]), ("optim.v.", &mut self.optim.second[i])] {
                let key = format!("{prefix}{name}");
                let t = tensors
                    .get(&key)
                    .filter(|t| t.len() == store.len())
                    .ok_or_else(|| GcmaeError::Checkpoint(format!("missing optimizer tensor {key}")))?;
                store.copy_from_slice(t.as_slice());
            }
        }
        Ok(())
    }
}
