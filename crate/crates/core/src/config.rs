//! Run configuration and its flat `key = value` text format.
//!
//! ```text
//! # comment
//! seed = 7
//! encoder.depth = 4
//! data.kind = synthetic
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::decoder::{DecoderConfig, LossMode};
use crate::encoder::EncoderConfig;
use crate::error::{GcmaeError, Result};
use crate::eval::{FineTuneConfig, ProbeConfig};
use crate::loss::{DEFAULT_LAMBDA1, DEFAULT_LAMBDA2};
use crate::membank::{DEFAULT_MOMENTUM, DEFAULT_NEGATIVES, DEFAULT_TEMPERATURE};
use crate::optim::AdamWConfig;
use crate::patching::TargetNorm;
use crate::training::{Objective, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    pub bank_momentum: f64,
    pub negatives: usize,
    pub objective: Objective,
    pub loss_mode: LossMode,
    pub target_norm: TargetNorm,
    pub optimizer: AdamWConfig,
    pub schedule: Schedule,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub data: DatasetSpec,
    pub probe: ProbeConfig,
    pub finetune: FineTuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            seed: 0,
            epochs: 80,
            batch_size: 64,
            mask_ratio: 0.5,
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            temperature: DEFAULT_TEMPERATURE,
            bank_momentum: DEFAULT_MOMENTUM,
            negatives: DEFAULT_NEGATIVES,
            objective: Objective::Gcmae,
            loss_mode: LossMode::MaskedOnly,
            target_norm: TargetNorm::DatasetNorm,
            optimizer: AdamWConfig::default(),
            schedule: Schedule::Constant,
            decoder: DecoderConfig::for_encoder(encoder.dim),
            data: DatasetSpec {
                tile_size: encoder.tile_size,
                channels: encoder.channels,
                ..DatasetSpec::default()
            },
            encoder,
            probe: ProbeConfig::default(),
            finetune: FineTuneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small model on 16-pixel synthetic tiles; trains in seconds.
    pub fn toy() -> Self {
        let encoder = EncoderConfig {
            tile_size: 16,
            channels: 3,
            patch_size: 4,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            ..EncoderConfig::default()
        };
        Self {
            epochs: 20,
            batch_size: 32,
            negatives: 256,
            decoder: DecoderConfig {
                dim: 16,
                depth: 2,
                heads: 2,
                mlp_ratio: 2.0,
                final_norm: true,
            },
            data: DatasetSpec {
                tile_size: encoder.tile_size,
                channels: encoder.channels,
                ..DatasetSpec::default()
            },
            encoder,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let bad = |msg: String| Err(GcmaeError::Config(msg));
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(GcmaeError::RatioOutOfRange(self.mask_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return Err(GcmaeError::InvalidTemperature(self.temperature));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return bad(format!("bank_momentum {} outside [0, 1]", self.bank_momentum));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!("loss weights must be non-negative, got ({}, {})", self.lambda1, self.lambda2));
        }
        if self.objective == Objective::Gcmae && self.negatives == 0 {
            return bad("contrastive objective needs at least one negative".into());
        }
        if self.data.tile_size != self.encoder.tile_size || self.data.channels != self.encoder.channels {
            return bad(format!(
                "data tiles {}px x{} do not match encoder input {}px x{}",
                self.data.tile_size, self.data.channels, self.encoder.tile_size, self.encoder.channels
            ));
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return bad(format!("data.path {} does not exist", p.display()));
            }
        }
        self.probe.validate()?;
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "bank_momentum" => self.bank_momentum = parse(key, v)?,
            "negatives" => self.negatives = parse(key, v)?,
            "objective" => self.objective = parse(key, v)?,
            "loss_mode" => self.loss_mode = parse(key, v)?,
            "target_norm" => self.target_norm = parse(key, v)?,

            "optimizer.lr" => self.optimizer.lr = parse(key, v)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse(key, v)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse(key, v)?,
            "optimizer.eps" => self.optimizer.eps = parse(key, v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(key, v)?,

            "schedule.kind" => {
                self.schedule = match v {
                    "constant" => Schedule::Constant,
                    "warmup-cosine" => match self.schedule {
                        s @ Schedule::WarmupCosine { .. } => s,
                        Schedule::Constant => Schedule::WarmupCosine {
                            warmup_epochs: 0.0,
                            min_lr: 0.0,
                        },
                    },
                    other => return Err(GcmaeError::Config(format!("unknown schedule '{other}'"))),
                }
            }
            "schedule.warmup_epochs" | "schedule.min_lr" => match &mut self.schedule {
                Schedule::WarmupCosine { warmup_epochs, min_lr } => {
                    let slot = if key.trim().ends_with("warmup_epochs") { warmup_epochs } else { min_lr };
                    *slot = parse(key, v)?;
                }
                Schedule::Constant => {
                    return Err(GcmaeError::Config(format!("{key} needs schedule.kind = warmup-cosine first")));
                }
            },

            "encoder.tile_size" => {
                self.encoder.tile_size = parse(key, v)?;
                self.data.tile_size = self.encoder.tile_size;
            }
            "encoder.channels" => {
                self.encoder.channels = parse(key, v)?;
                self.data.channels = self.encoder.channels;
            }
            "encoder.patch_size" => self.encoder.patch_size = parse(key, v)?,
            "encoder.dim" => self.encoder.dim = parse(key, v)?,
            "encoder.depth" => self.encoder.depth = parse(key, v)?,
            "encoder.heads" => self.encoder.heads = parse(key, v)?,
            "encoder.mlp_ratio" => self.encoder.mlp_ratio = parse(key, v)?,
            "encoder.dropout" => self.encoder.dropout = parse(key, v)?,
            "encoder.pooling" => self.encoder.pooling = parse(key, v)?,
            "encoder.final_norm" => self.encoder.final_norm = parse(key, v)?,

            "decoder.dim" => self.decoder.dim = parse(key, v)?,
            "decoder.depth" => self.decoder.depth = parse(key, v)?,
            "decoder.heads" => self.decoder.heads = parse(key, v)?,
            "decoder.mlp_ratio" => self.decoder.mlp_ratio = parse(key, v)?,
            "decoder.final_norm" => self.decoder.final_norm = parse(key, v)?,

            "data.kind" => self.data.kind = parse(key, v)?,
            "data.tile_size" => self.data.tile_size = parse(key, v)?,
            "data.channels" => self.data.channels = parse(key, v)?,
            "data.classes" => self.data.classes = parse(key, v)?,
            "data.n_train" => self.data.n_train = parse(key, v)?,
            "data.n_test" => self.data.n_test = parse(key, v)?,
            "data.path" => self.data.path = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "data.test_fraction" => self.data.test_fraction = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.noise" => self.data.noise = parse(key, v)?,
            "data.microns_per_pixel" => self.data.microns_per_pixel = parse(key, v)?,

            "probe.fraction" => self.probe.fraction = parse(key, v)?,
            "probe.max_epochs" => self.probe.max_epochs = parse(key, v)?,
            "probe.lr" => self.probe.lr = parse(key, v)?,
            "probe.batch_size" => self.probe.batch_size = parse(key, v)?,
            "probe.patience" => self.probe.patience = parse(key, v)?,
            "probe.min_delta" => self.probe.min_delta = parse(key, v)?,
            "probe.seed" => self.probe.seed = parse(key, v)?,

            "finetune.epochs" => self.finetune.epochs = parse(key, v)?,
            "finetune.lr" => self.finetune.lr = parse(key, v)?,
            "finetune.batch_size" => self.finetune.batch_size = parse(key, v)?,
            "finetune.weight_decay" => self.finetune.weight_decay = parse(key, v)?,

            other => return Err(GcmaeError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GcmaeError::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            self.set(k, v)
                .map_err(|e| GcmaeError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Reads a config file. A leading `preset = toy` line selects the toy
    /// base instead of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rest = String::new();
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            match line.split('#').next().unwrap_or("").split_once('=') {
                Some((k, v)) if k.trim() == "preset" => {
                    cfg = match v.trim() {
                        "toy" => RunConfig::toy(),
                        "default" => RunConfig::default(),
                        "vit-base" => {
                            let encoder = EncoderConfig::vit_base();
                            RunConfig {
                                decoder: DecoderConfig::for_encoder(encoder.dim),
                                data: DatasetSpec {
                                    tile_size: encoder.tile_size,
                                    ..DatasetSpec::default()
                                },
                                encoder,
                                ..RunConfig::default()
                            }
                        }
                        other => return Err(GcmaeError::Config(format!("unknown preset '{other}'"))),
                    }
                }
                _ => {
                    rest.push_str(line);
                    rest.push('\n');
                }
            }
        }
        cfg.apply_text(&rest)?;
        Ok(cfg)
    }

    /// Canonical `key = value` listing of every setting.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("mask_ratio", fmt_f(self.mask_ratio));
        put("lambda1", fmt_f(self.lambda1));
        put("lambda2", fmt_f(self.lambda2));
        put("temperature", fmt_f(self.temperature));
        put("bank_momentum", fmt_f(self.bank_momentum));
        put("negatives", self.negatives.to_string());
        put("objective", self.objective.as_str().into());
        put("loss_mode", self.loss_mode.as_str().into());
        put("target_norm", self.target_norm.as_str().into());
        let o = &self.optimizer;
        put("optimizer.lr", fmt_f(o.lr));
        put("optimizer.beta1", fmt_f(o.beta1));
        put("optimizer.beta2", fmt_f(o.beta2));
        put("optimizer.eps", fmt_f(o.eps));
        put("optimizer.weight_decay", fmt_f(o.weight_decay));
        match self.schedule {
            Schedule::Constant => put("schedule.kind", "constant".into()),
            Schedule::WarmupCosine { warmup_epochs, min_lr } => {
                put("schedule.kind", "warmup-cosine".into());
                put("schedule.warmup_epochs", fmt_f(warmup_epochs));
                put("schedule.min_lr", fmt_f(min_lr));
            }
        }
        let e = &self.encoder;
        put("encoder.tile_size", e.tile_size.to_string());
        put("encoder.channels", e.channels.to_string());
        put("encoder.patch_size", e.patch_size.to_string());
        put("encoder.dim", e.dim.to_string());
        put("encoder.depth", e.depth.to_string());
        put("encoder.heads", e.heads.to_string());
        put("encoder.mlp_ratio", fmt_f(e.mlp_ratio));
        put("encoder.dropout", fmt_f(e.dropout));
        put("encoder.pooling", e.pooling.as_str().into());
        put("encoder.final_norm", e.final_norm.to_string());
        let d = &self.decoder;
        put("decoder.dim", d.dim.to_string());
        put("decoder.depth", d.depth.to_string());
        put("decoder.heads", d.heads.to_string());
        put("decoder.mlp_ratio", fmt_f(d.mlp_ratio));
        put("decoder.final_norm", d.final_norm.to_string());
        let g = &self.data;
        put(
            "data.kind",
            match g.kind {
                crate::data::DatasetKind::Synthetic => "synthetic".into(),
                crate::data::DatasetKind::ImageFolder => "image-folder".into(),
            },
        );
        put("data.tile_size", g.tile_size.to_string());
        put("data.channels", g.channels.to_string());
        put("data.classes", g.classes.to_string());
        put("data.n_train", g.n_train.to_string());
        put("data.n_test", g.n_test.to_string());
        put("data.path", g.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put("data.test_fraction", fmt_f(g.test_fraction));
        put("data.seed", g.seed.to_string());
        put("data.noise", fmt_f(g.noise));
        put("data.microns_per_pixel", fmt_f(g.microns_per_pixel));
        let p = &self.probe;
        put("probe.fraction", fmt_f(p.fraction));
        put("probe.max_epochs", p.max_epochs.to_string());
        put("probe.lr", fmt_f(p.lr));
        put("probe.batch_size", p.batch_size.to_string());
        put("probe.patience", p.patience.to_string());
        put("probe.min_delta", fmt_f(p.min_delta));
        put("probe.seed", p.seed.to_string());
        let f = &self.finetune;
        put("finetune.epochs", f.epochs.to_string());
        put("finetune.lr", fmt_f(f.lr));
        put("finetune.batch_size", f.batch_size.to_string());
        put("finetune.weight_decay", fmt_f(f.weight_decay));
        s
    }

    /// SHA-256 of the canonical listing, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.to_kv().as_bytes())
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| GcmaeError::Config(format!("cannot parse '{v}' for {}", key.trim())))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Pooling;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let cfg = RunConfig::from_text("# run\nseed = 7  # trailing\n\nencoder.depth=3\nencoder.pooling = cls\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.encoder.depth, 3);
        assert_eq!(cfg.encoder.pooling, Pooling::ClassToken);
        assert_eq!(cfg.epochs, 80);
    }

    #[test]
    fn preset_and_errors() {
        let cfg = RunConfig::from_text("epochs = 3\npreset = toy\n").unwrap();
        assert_eq!(cfg.encoder.dim, 32);
        assert_eq!(cfg.epochs, 3);
        assert!(RunConfig::from_text("nope = 1").is_err());
        assert!(RunConfig::from_text("seed 1").is_err());
        assert!(RunConfig::from_text("seed = x").is_err());
        assert!(RunConfig::from_text("schedule.min_lr = 0.1").is_err());
    }

    #[test]
    fn kv_round_trip_preserves_config_and_hash() {
        let mut cfg = RunConfig::toy();
        cfg.set("schedule.kind", "warmup-cosine").unwrap();
        cfg.set("schedule.warmup_epochs", "2").unwrap();
        cfg.set("optimizer.lr", "0.0003").unwrap();
        let back = RunConfig::from_text(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::toy().validate().unwrap();
        let mut bad = RunConfig::toy();
        bad.mask_ratio = 1.0;
        assert!(bad.validate().is_err());
        bad = RunConfig::toy();
        bad.data.path = Some("/definitely/not/here".into());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_visible_count_at_vit_scale() {
        let cfg = RunConfig::from_text("preset = vit-base").unwrap();
        let n = cfg.encoder.n_patches();
        assert_eq!(n, 196);
        assert_eq!(n - crate::patching::masked_count(n, cfg.mask_ratio), 98);
    }
}
