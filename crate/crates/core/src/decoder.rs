//! Lightweight transformer decoder that rebuilds masked patches from the
//! visible latents plus a shared mask token.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::encoder::{token_init, LatentSeq};
use crate::error::{GcmaeError, Result};
use crate::nn::{join, Block, BlockCache, Dropout, LayerNorm, LayerNormCache, Linear, ParamTree};
use crate::patching::MaskPlan;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Average over the pixels of masked patches only.
    #[default]
    MaskedOnly,
    /// Average over every pixel of the tile.
    AllPatches,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::MaskedOnly => "masked-only",
            LossMode::AllPatches => "all-patches",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = GcmaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked-only" | "masked" => Ok(LossMode::MaskedOnly),
            "all-patches" | "all" => Ok(LossMode::AllPatches),
            other => Err(GcmaeError::Config(format!("unknown loss mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub final_norm: bool,
}

impl DecoderConfig {
    /// Defaults relative to an encoder of width `encoder_dim`: half its width, eight blocks.
    pub fn for_encoder(encoder_dim: usize) -> Self {
        let dim = (encoder_dim / 2).max(1);
        Self {
            dim,
            depth: 8,
            heads: if dim.is_multiple_of(4) { 4 } else { 1 },
            mlp_ratio: 4.0,
            final_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(GcmaeError::Config(format!(
                "decoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// Encoder width → decoder width.
    pub embed: Linear,
    pub mask_token: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
    /// Decoder width → pixels per patch.
    pub head: Linear,
}

impl ParamTree for DecoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.embed.visit(&join(prefix, "embed"), f);
        f(join(prefix, "mask_token"), &self.mask_token);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        self.blocks.visit(&join(prefix, "blocks"), f);
        if let Some(n) = &self.norm {
            n.visit(&join(prefix, "norm"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        f(join(prefix, "mask_token"), &mut self.mask_token);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        if let Some(n) = &mut self.norm {
            n.visit_mut(&join(prefix, "norm"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Normalized targets for all N patches plus the loss mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconTarget {
    pub patches: Matrix,
    pub mode: LossMode,
}

pub struct AssembleCache {
    latents: Matrix,
    visible: Vec<usize>,
    masked: Vec<usize>,
}

pub struct DecodeCache {
    blocks: Vec<BlockCache>,
    norm: Option<LayerNormCache>,
    head_in: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: DecoderParams,
}

impl Decoder {
    pub fn new<R: RngCore>(config: DecoderConfig, encoder_dim: usize, n_patches: usize, patch_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let embed = Linear::new(encoder_dim, d, rng);
        let mask_token = token_init(1, d, rng);
        let pos_embed = token_init(n_patches, d, rng);
        let blocks = (0..config.depth)
            .map(|_| Block::new(d, config.heads, config.mlp_ratio, rng))
            .collect();
        let norm = config.final_norm.then(|| LayerNorm::new(d));
        let head = Linear::new(d, patch_dim, rng);
        Ok(Self {
            config,
            params: DecoderParams {
                embed,
                mask_token,
                pos_embed,
                blocks,
                norm,
                head,
            },
        })
    }

    pub fn n_patches(&self) -> usize {
        self.params.pos_embed.rows()
    }

    /// Full `N × D_d` decoder input in row-major patch order: projected
    /// latents at visible positions, the mask token elsewhere, plus the
    /// decoder positional embedding everywhere.
    pub fn assemble_decoder_input(&self, latents: &LatentSeq, plan: &MaskPlan) -> Result<(Matrix, AssembleCache)> {
        let p = &self.params;
        if latents.vectors.rows() != plan.visible.len() || latents.visible != plan.visible {
            return Err(GcmaeError::shape(format!(
                "{} latents for {} visible patches",
                latents.vectors.rows(),
                plan.visible.len()
            )));
        }
        if plan.n_patches() != self.n_patches() {
            return Err(GcmaeError::shape(format!(
                "plan covers {} patches, decoder expects {}",
                plan.n_patches(),
                self.n_patches()
            )));
        }
        if latents.vectors.cols() != p.embed.in_dim() {
            return Err(GcmaeError::shape(format!(
                "latent dim {} but decoder embed expects {}",
                latents.vectors.cols(),
                p.embed.in_dim()
            )));
        }
        let projected = p.embed.forward(&latents.vectors);
        let mut seq = p.pos_embed.clone();
        for (i, &idx) in plan.visible.iter().enumerate() {
            for (s, v) in seq.row_mut(idx).iter_mut().zip(projected.row(i)) {
                *s += v;
            }
        }
        for &idx in &plan.masked {
            for (s, v) in seq.row_mut(idx).iter_mut().zip(p.mask_token.row(0)) {
                *s += v;
            }
        }
        Ok((
            seq,
            AssembleCache {
                latents: latents.vectors.clone(),
                visible: plan.visible.clone(),
                masked: plan.masked.clone(),
            },
        ))
    }

    /// Transformer blocks then the per-patch pixel head.
    pub fn decode(&self, seq: &Matrix) -> Result<(Matrix, DecodeCache)> {
        if seq.rows() != self.n_patches() || seq.cols() != self.config.dim {
            return Err(GcmaeError::shape(format!(
                "decoder input {}x{}, expected {}x{}",
                seq.rows(),
                seq.cols(),
                self.n_patches(),
                self.config.dim
            )));
        }
        let mut x = seq.clone();
        let mut blocks = Vec::with_capacity(self.params.blocks.len());
        let mut no_drop = Dropout::disabled();
        for (i, block) in self.params.blocks.iter().enumerate() {
            let (y, c) = block.forward(&x, &mut no_drop);
            if !y.all_finite() {
                return Err(GcmaeError::NonFinite(format!("decoder block {i}")));
            }
            blocks.push(c);
            x = y;
        }
        let norm = match &self.params.norm {
            Some(n) => {
                let (y, c) = n.forward(&x);
                x = y;
                Some(c)
            }
            None => None,
        };
        let out = self.params.head.forward(&x);
        if !out.all_finite() {
            return Err(GcmaeError::NonFinite("decoder head".into()));
        }
        Ok((out, DecodeCache { blocks, norm, head_in: x }))
    }

    /// Assemble + decode.
    pub fn forward(&self, latents: &LatentSeq, plan: &MaskPlan) -> Result<(Matrix, AssembleCache, DecodeCache)> {
        let (seq, ac) = self.assemble_decoder_input(latents, plan)?;
        let (out, dc) = self.decode(&seq)?;
        Ok((out, ac, dc))
    }

    /// Accumulates decoder gradients and returns the gradient w.r.t. the
    /// encoder latents.
    pub fn backward(&self, ac: &AssembleCache, dc: &DecodeCache, d_recon: &Matrix, grads: &mut DecoderParams) -> Matrix {
        let p = &self.params;
        let mut dx = p.head.backward(&dc.head_in, d_recon, &mut grads.head);
        if let (Some(n), Some(nc), Some(gn)) = (&p.norm, &dc.norm, grads.norm.as_mut()) {
            dx = n.backward(nc, &dx, gn);
        }
        for (i, block) in p.blocks.iter().enumerate().rev() {
            dx = block.backward(&dc.blocks[i], &dx, &mut grads.blocks[i]);
        }
        grads.pos_embed.add_assign(&dx);
        for &idx in &ac.masked {
            for (g, d) in grads.mask_token.as_mut_slice().iter_mut().zip(dx.row(idx)) {
                *g += d;
            }
        }
        let d_proj = dx.select_rows(&ac.visible);
        p.embed.backward(&ac.latents, &d_proj, &mut grads.embed)
    }
}

fn selected_rows(n: usize, plan: &MaskPlan, mode: LossMode) -> Vec<usize> {
    match mode {
        LossMode::MaskedOnly => plan.masked.clone(),
        LossMode::AllPatches => (0..n).collect(),
    }
}

/// Mean squared error over the selected pixels.
pub fn mse_loss(recon: &Matrix, target: &ReconTarget, plan: &MaskPlan) -> Result<f64> {
    mse_loss_grad(recon, target, plan).map(|(l, _)| l)
}

/// Loss and its gradient w.r.t. `recon` (zero on unselected patches).
pub fn mse_loss_grad(recon: &Matrix, target: &ReconTarget, plan: &MaskPlan) -> Result<(f64, Matrix)> {
    if recon.shape() != target.patches.shape() {
        return Err(GcmaeError::shape(format!(
            "reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.patches.shape()
        )));
    }
    if plan.n_patches() != recon.rows() {
        return Err(GcmaeError::shape("mask plan does not cover the reconstruction"));
    }
    let rows = selected_rows(recon.rows(), plan, target.mode);
    let count = rows.len() * recon.cols();
    if count == 0 {
        return Err(GcmaeError::Empty("no pixels selected for the reconstruction loss".into()));
    }
    let n = count as f64;
    let mut grad = Matrix::zeros(recon.rows(), recon.cols());
    let mut sum = 0.0;
    for &r in &rows {
        let g = grad.row_mut(r);
        for ((gi, a), b) in g.iter_mut().zip(recon.row(r)).zip(target.patches.row(r)) {
            let diff = a - b;
            sum += diff * diff;
            *gi = 2.0 * diff / n;
        }
    }
    Ok((sum / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gelu;
    use crate::patching::sample_mask;
    use crate::rng;

    fn toy(depth: usize) -> Decoder {
        let cfg = DecoderConfig {
            dim: 8,
            depth,
            heads: 2,
            mlp_ratio: 2.0,
            final_norm: false,
        };
        Decoder::new(cfg, 6, 4, 12, &mut rng::stream(0, "dec", depth as u64)).unwrap()
    }

    fn latents(plan: &MaskPlan, seed: u64) -> LatentSeq {
        LatentSeq {
            vectors: Matrix::uniform(plan.visible.len(), 6, 1.0, &mut rng::stream(seed, "lat", 0)),
            visible: plan.visible.clone(),
        }
    }

    #[test]
    fn no_mask_tokens_at_ratio_zero() {
        let dec = toy(1);
        let plan = MaskPlan::full(4);
        let lat = latents(&plan, 1);
        let (seq, _) = dec.assemble_decoder_input(&lat, &plan).unwrap();
        let mut expect = dec.params.embed.forward(&lat.vectors);
        expect.add_assign(&dec.params.pos_embed);
        assert!(seq.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn one_masked_row_is_mask_token_plus_position() {
        let dec = toy(1);
        let plan = sample_mask(4, 0.25, 5).unwrap();
        assert_eq!(plan.masked.len(), 1);
        let m = plan.masked[0];
        let (seq, _) = dec.assemble_decoder_input(&latents(&plan, 2), &plan).unwrap();
        for j in 0..8 {
            let e = dec.params.mask_token.get(0, j) + dec.params.pos_embed.get(m, j);
            assert_eq!(seq.get(m, j), e);
        }
        let proj = dec.params.embed.forward(&latents(&plan, 2).vectors);
        for (i, &v) in plan.visible.iter().enumerate() {
            for j in 0..8 {
                assert!((seq.get(v, j) - proj.get(i, j) - dec.params.pos_embed.get(v, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_latents_zero_token_give_position_table() {
        let mut dec = toy(1);
        dec.params.mask_token.fill(0.0);
        dec.params.embed.bias.fill(0.0);
        let plan = sample_mask(4, 0.5, 3).unwrap();
        let lat = LatentSeq {
            vectors: Matrix::zeros(2, 6),
            visible: plan.visible.clone(),
        };
        let (seq, _) = dec.assemble_decoder_input(&lat, &plan).unwrap();
        assert_eq!(seq, dec.params.pos_embed);
    }

    #[test]
    fn assemble_rejects_mismatch() {
        let dec = toy(1);
        let plan = sample_mask(4, 0.5, 3).unwrap();
        let other = sample_mask(4, 0.25, 3).unwrap();
        assert!(dec.assemble_decoder_input(&latents(&other, 0), &plan).is_err());
    }

    #[test]
    fn depth_zero_identity_head_passes_input() {
        let mut dec = Decoder::new(
            DecoderConfig {
                dim: 12,
                depth: 0,
                heads: 1,
                mlp_ratio: 1.0,
                final_norm: false,
            },
            6,
            4,
            12,
            &mut rng::stream(0, "dec", 9),
        )
        .unwrap();
        let mut eye = Matrix::zeros(12, 12);
        (0..12).for_each(|i| eye.set(i, i, 1.0));
        dec.params.head.weight = eye;
        let seq = Matrix::uniform(4, 12, 1.0, &mut rng::stream(1, "seq", 0));
        let (out, _) = dec.decode(&seq).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn single_block_matches_reimplementation() {
        // Independent single-block forward written with explicit loops.
        let dec = toy(1);
        let seq = Matrix::uniform(4, 8, 1.0, &mut rng::stream(2, "seq", 0));
        let (out, _) = dec.decode(&seq).unwrap();
        let b = &dec.params.blocks[0];
        let ln = |x: &[f64], g: &Matrix, s: &Matrix| -> Vec<f64> {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
            (0..x.len()).map(|i| (x[i] - m) / (v + 1e-6).sqrt() * g.get(0, i) + s.get(0, i)).collect()
        };
        let lin = |x: &[f64], l: &Linear| -> Vec<f64> {
            (0..l.out_dim())
                .map(|j| l.bias.get(0, j) + (0..x.len()).map(|i| x[i] * l.weight.get(i, j)).sum::<f64>())
                .collect()
        };
        let rows: Vec<Vec<f64>> = (0..4).map(|r| seq.row(r).to_vec()).collect();
        let normed: Vec<Vec<f64>> = rows.iter().map(|x| ln(x, &b.norm1.gain, &b.norm1.shift)).collect();
        let qkv: Vec<Vec<f64>> = normed.iter().map(|x| lin(x, &b.attn.qkv)).collect();
        let (heads, dh) = (2, 4);
        let mut mixed = vec![vec![0.0; 8]; 4];
        for h in 0..heads {
            for i in 0..4 {
                let scores: Vec<f64> = (0..4)
                    .map(|j| (0..dh).map(|t| qkv[i][h * dh + t] * qkv[j][8 + h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..4 {
                    let p = (scores[j] - mx).exp() / z;
                    for t in 0..dh {
                        mixed[i][h * dh + t] += p * qkv[j][16 + h * dh + t];
                    }
                }
            }
        }
        for i in 0..4 {
            let a = lin(&mixed[i], &b.attn.proj);
            let h: Vec<f64> = rows[i].iter().zip(&a).map(|(x, y)| x + y).collect();
            let hid: Vec<f64> = lin(&ln(&h, &b.norm2.gain, &b.norm2.shift), &b.mlp.fc1).into_iter().map(gelu).collect();
            let m = lin(&hid, &b.mlp.fc2);
            let y: Vec<f64> = h.iter().zip(&m).map(|(x, y)| x + y).collect();
            let px = lin(&y, &dec.params.head);
            for (j, e) in px.iter().enumerate() {
                assert!((out.get(i, j) - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn default_geometry_outputs_768_per_patch() {
        let cfg = DecoderConfig {
            depth: 1,
            ..DecoderConfig::for_encoder(32)
        };
        let dec = Decoder::new(cfg, 32, 196, 768, &mut rng::stream(0, "dec", 10)).unwrap();
        let seq = Matrix::zeros(196, 16);
        assert_eq!(dec.decode(&seq).unwrap().0.shape(), (196, 768));
        assert_eq!(DecoderConfig::for_encoder(128).depth, 8);
        assert_eq!(DecoderConfig::for_encoder(128).dim, 64);
    }

    #[test]
    fn mse_basic_cases() {
        let plan = sample_mask(4, 0.5, 1).unwrap();
        let target = ReconTarget {
            patches: Matrix::zeros(4, 3),
            mode: LossMode::MaskedOnly,
        };
        assert_eq!(mse_loss(&Matrix::zeros(4, 3), &target, &plan).unwrap(), 0.0);
        let ones = Matrix::filled(4, 3, 1.0);
        assert_eq!(mse_loss(&ones, &target, &plan).unwrap(), 1.0);
        let all = ReconTarget {
            mode: LossMode::AllPatches,
            ..target.clone()
        };
        assert_eq!(mse_loss(&ones, &all, &plan).unwrap(), 1.0);
    }

    #[test]
    fn mse_hand_computed_modes() {
        let plan = MaskPlan {
            visible: vec![0],
            masked: vec![1],
            ratio: 0.5,
            seed: 0,
        };
        let recon = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 3.0]]);
        let zero = Matrix::zeros(2, 2);
        let masked = ReconTarget {
            patches: zero.clone(),
            mode: LossMode::MaskedOnly,
        };
        let all = ReconTarget {
            patches: zero,
            mode: LossMode::AllPatches,
        };
        assert_eq!(mse_loss(&recon, &masked, &plan).unwrap(), 5.0);
        assert_eq!(mse_loss(&recon, &all, &plan).unwrap(), 2.5);
    }

    #[test]
    fn mse_empty_selection_and_shape_errors() {
        let plan = MaskPlan::full(2);
        let target = ReconTarget {
            patches: Matrix::zeros(2, 2),
            mode: LossMode::MaskedOnly,
        };
        assert!(matches!(mse_loss(&Matrix::zeros(2, 2), &target, &plan), Err(GcmaeError::Empty(_))));
        assert!(mse_loss(&Matrix::zeros(3, 2), &target, &plan).is_err());
    }

    #[test]
    fn visible_pixels_do_not_affect_masked_loss() {
        let plan = sample_mask(4, 0.5, 7).unwrap();
        let mut r = rng::stream(3, "mse", 0);
        let recon = Matrix::uniform(4, 3, 1.0, &mut r);
        let target = ReconTarget {
            patches: Matrix::uniform(4, 3, 1.0, &mut r),
            mode: LossMode::MaskedOnly,
        };
        let base = mse_loss(&recon, &target, &plan).unwrap();
        let mut changed = target.clone();
        changed.patches.set(plan.visible[0], 1, 42.0);
        assert_eq!(mse_loss(&recon, &changed, &plan).unwrap(), base);
        assert!(base > 0.0);
    }
}
