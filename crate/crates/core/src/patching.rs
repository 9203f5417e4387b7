//! Tiles, patch sequences and random patch masking.

use serde::{Deserialize, Serialize};

use crate::error::{GcmaeError, Result};
use crate::rng;
use crate::tensor::Matrix;

/// Guard added to the per-patch standard deviation.
pub const PATCH_NORM_EPS: f64 = 1e-6;

/// One image tile, pixels in `H × W × C` row-major (channel-last) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub id: usize,
    pub label: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Tile {
    pub fn new(id: usize, height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(GcmaeError::shape(format!(
                "tile {height}x{width}x{channels} needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            id,
            label: None,
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// `N × (P·P·C)` patch vectors in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSeq {
    pub patches: Matrix,
    pub patch_size: usize,
    pub channels: usize,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
}

impl PatchSeq {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Partition of patch indices into visible and masked sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Plan with every patch visible (used for probing and fine-tuning).
    pub fn full(n_patches: usize) -> Self {
        Self {
            visible: (0..n_patches).collect(),
            masked: Vec::new(),
            ratio: 0.0,
            seed: 0,
        }
    }

    /// Per-patch flag: `true` where the patch is masked.
    pub fn mask_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n_patches()];
        for &m in &self.masked {
            flags[m] = true;
        }
        flags
    }
}

/// Number of masked patches for `ratio` of `n` (round half up).
pub fn masked_count(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64 + 0.5).floor() as usize
}

pub fn patchify(tile: &Tile, patch_size: usize) -> Result<PatchSeq> {
    if patch_size == 0 || !tile.height.is_multiple_of(patch_size) || !tile.width.is_multiple_of(patch_size) {
        return Err(GcmaeError::shape(format!(
            "tile {}x{} not divisible by patch size {patch_size}",
            tile.height, tile.width
        )));
    }
    let (gh, gw) = (tile.height / patch_size, tile.width / patch_size);
    let c = tile.channels;
    let dim = patch_size * patch_size * c;
    let mut patches = Matrix::zeros(gh * gw, dim);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row_mut(gy * gw + gx);
            for py in 0..patch_size {
                let y = gy * patch_size + py;
                let src = (y * tile.width + gx * patch_size) * c;
                let dst = py * patch_size * c;
                row[dst..dst + patch_size * c].copy_from_slice(&tile.pixels[src..src + patch_size * c]);
            }
        }
    }
    Ok(PatchSeq {
        patches,
        patch_size,
        channels: c,
        grid: (gh, gw),
    })
}

/// Inverse of [`patchify`]; the returned tile has id 0 and no label.
pub fn unpatchify(seq: &PatchSeq) -> Result<Tile> {
    let (gh, gw) = seq.grid;
    let p = seq.patch_size;
    let c = seq.channels;
    if seq.patches.rows() != gh * gw {
        return Err(GcmaeError::shape(format!(
            "expected {} patches for a {gh}x{gw} grid, got {}",
            gh * gw,
            seq.patches.rows()
        )));
    }
    if seq.patches.cols() != p * p * c {
        return Err(GcmaeError::shape(format!(
            "patch length {} does not match {p}x{p}x{c}",
            seq.patches.cols()
        )));
    }
    let (h, w) = (gh * p, gw * p);
    let mut pixels = vec![0.0; h * w * c];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = seq.patches.row(gy * gw + gx);
            for py in 0..p {
                let y = gy * p + py;
                let dst = (y * w + gx * p) * c;
                let src = py * p * c;
                pixels[dst..dst + p * c].copy_from_slice(&row[src..src + p * c]);
            }
        }
    }
    Tile::new(0, h, w, c, pixels)
}

/// Uniform random mask: a seeded permutation of the patch indices whose
/// prefix of length `round(ratio·n)` is masked.
pub fn sample_mask(n_patches: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) || ratio.is_nan() {
        return Err(GcmaeError::RatioOutOfRange(ratio));
    }
    if n_patches == 0 {
        return Err(GcmaeError::Empty("mask over zero patches".into()));
    }
    let n_masked = masked_count(n_patches, ratio);
    if n_masked >= n_patches {
        return Err(GcmaeError::RatioOutOfRange(ratio));
    }
    let mut stream = rng::stream(seed, "mask", n_patches as u64);
    let perm = rng::permutation(n_patches, &mut stream);
    let mut masked = perm[..n_masked].to_vec();
    let mut visible = perm[n_masked..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        visible,
        masked,
        ratio,
        seed,
    })
}

/// Per-channel dataset statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(GcmaeError::shape("mean/std channel counts differ"));
        }
        for (c, (&m, &s)) in self.mean.iter().zip(&self.std).enumerate() {
            if !m.is_finite() || !s.is_finite() {
                return Err(GcmaeError::NonFinite(format!("normalization stats, channel {c}")));
            }
            if s <= 0.0 {
                return Err(GcmaeError::ZeroVariance { channel: c });
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetNorm {
    #[default]
    DatasetNorm,
    PerPatchNorm,
}

impl TargetNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetNorm::DatasetNorm => "dataset-norm",
            TargetNorm::PerPatchNorm => "per-patch-norm",
        }
    }
}

impl std::str::FromStr for TargetNorm {
    type Err = GcmaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset-norm" | "dataset" => Ok(TargetNorm::DatasetNorm),
            "per-patch-norm" | "patch" | "per-patch" => Ok(TargetNorm::PerPatchNorm),
            other => Err(GcmaeError::Config(format!("unknown target normalization '{other}'"))),
        }
    }
}

/// Applies per-channel dataset normalization, `(x − mean_c) / std_c`.
pub fn normalize_tile(tile: &Tile, stats: &NormStats) -> Result<Tile> {
    stats.validate()?;
    if stats.channels() != tile.channels {
        return Err(GcmaeError::shape(format!(
            "stats have {} channels, tile has {}",
            stats.channels(),
            tile.channels
        )));
    }
    let c = tile.channels;
    let pixels = tile
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - stats.mean[i % c]) / stats.std[i % c])
        .collect();
    Ok(Tile {
        pixels,
        ..tile.clone()
    })
}

/// Standardizes each row to mean 0 and population std 1 (ε added to std).
pub fn per_patch_standardize(patches: &mut Matrix) {
    let d = patches.cols() as f64;
    for r in 0..patches.rows() {
        let row = patches.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let denom = var.sqrt() + PATCH_NORM_EPS;
        row.iter_mut().for_each(|v| *v = (*v - mean) / denom);
    }
}

/// Reconstruction target for `tile`. Dataset-norm is the model input itself;
/// per-patch-norm further standardizes each patch of the dataset-normalized tile.
pub fn normalize_target(tile: &Tile, patch_size: usize, mode: TargetNorm, stats: &NormStats) -> Result<PatchSeq> {
    let normalized = normalize_tile(tile, stats)?;
    let mut seq = patchify(&normalized, patch_size)?;
    if mode == TargetNorm::PerPatchNorm {
        per_patch_standardize(&mut seq.patches);
    }
    Ok(seq)
}
