//! ViT-style encoder over the visible patches of a tile.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{GcmaeError, Result};
use crate::nn::{join, Block, BlockCache, Dropout, LayerNorm, LayerNormCache, Linear, ParamTree};
use crate::patching::{MaskPlan, PatchSeq};
use crate::tensor::{l2_norm, Matrix};

/// How the per-tile feature is formed from the encoder output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over visible-patch latents, then L2 normalization.
    #[default]
    Mean,
    /// A learnable class token prepended to the sequence; its output is L2-normalized.
    ClassToken,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::ClassToken => "cls",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = GcmaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "cls" | "class-token" => Ok(Pooling::ClassToken),
            other => Err(GcmaeError::Config(format!("unknown pooling '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub tile_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    pub pooling: Pooling,
    /// LayerNorm after the last block.
    pub final_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            channels: 3,
            patch_size: 16,
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            dropout: 0.0,
            pooling: Pooling::Mean,
            final_norm: true,
        }
    }
}

impl EncoderConfig {
    /// ViT-B/16 on 224-pixel tiles.
    pub fn vit_base() -> Self {
        Self {
            tile_size: 224,
            patch_size: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.tile_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.tile_size.is_multiple_of(self.patch_size) {
            return Err(GcmaeError::Config(format!(
                "tile size {} not divisible by patch size {}",
                self.tile_size, self.patch_size
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(GcmaeError::Config(format!(
                "encoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GcmaeError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.channels == 0 || self.dim == 0 {
            return Err(GcmaeError::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub patch_embed: Linear,
    /// One learnable row per patch position.
    pub pos_embed: Matrix,
    pub cls_token: Option<Matrix>,
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
}

impl ParamTree for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        if let Some(cls) = &self.cls_token {
            f(join(prefix, "cls_token"), cls);
        }
        self.blocks.visit(&join(prefix, "blocks"), f);
        if let Some(norm) = &self.norm {
            norm.visit(&join(prefix, "norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        if let Some(cls) = &mut self.cls_token {
            f(join(prefix, "cls_token"), cls);
        }
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        if let Some(norm) = &mut self.norm {
            norm.visit_mut(&join(prefix, "norm"), f);
        }
    }
}

/// Encoder outputs for the visible patches, in `visible` order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq {
    pub vectors: Matrix,
    pub visible: Vec<usize>,
}

/// Unit-norm per-tile feature.
#[derive(Clone, Debug, PartialEq)]
pub struct TileFeature(pub Vec<f64>);

impl TileFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub struct EncoderOutput {
    pub latents: LatentSeq,
    /// Class-token output when pooling uses one.
    pub cls: Option<Vec<f64>>,
}

pub struct EncoderCache {
    patches_vis: Matrix,
    visible: Vec<usize>,
    blocks: Vec<BlockCache>,
    norm: Option<LayerNormCache>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

/// Std of the uniform init used for positional embeddings and tokens.
pub(crate) const TOKEN_INIT_STD: f64 = 0.02;

pub(crate) fn token_init<R: RngCore>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::uniform(rows, cols, TOKEN_INIT_STD * 3f64.sqrt(), rng)
}

impl Encoder {
    pub fn new<R: RngCore>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let patch_embed = Linear::new(config.patch_dim(), d, rng);
        let pos_embed = token_init(config.n_patches(), d, rng);
        let cls_token = (config.pooling == Pooling::ClassToken).then(|| token_init(1, d, rng));
        let blocks = (0..config.depth)
            .map(|_| Block::new(d, config.heads, config.mlp_ratio, rng))
            .collect();
        let norm = config.final_norm.then(|| LayerNorm::new(d));
        Ok(Self {
            config,
            params: EncoderParams {
                patch_embed,
                pos_embed,
                cls_token,
                blocks,
                norm,
            },
        })
    }

    /// Projects the visible patches and adds their positional embeddings:
    /// `token_i = patch_{visible[i]} · W + b + pos[visible[i]]`.
    pub fn embed_patches(&self, patches: &PatchSeq, plan: &MaskPlan) -> Result<Matrix> {
        let p = &self.params;
        if patches.len() != p.pos_embed.rows() || plan.n_patches() != patches.len() {
            return Err(GcmaeError::shape(format!(
                "{} patches / plan over {} / positional table of {}",
                patches.len(),
                plan.n_patches(),
                p.pos_embed.rows()
            )));
        }
        if patches.patch_dim() != p.patch_embed.in_dim() || patches.patches.cols() != p.patch_embed.in_dim() {
            return Err(GcmaeError::shape(format!(
                "patch length {} but projection expects {}",
                patches.patches.cols(),
                p.patch_embed.in_dim()
            )));
        }
        let vis = patches.patches.select_rows(&plan.visible);
        let mut tokens = p.patch_embed.forward(&vis);
        for (i, &idx) in plan.visible.iter().enumerate() {
            for (t, e) in tokens.row_mut(i).iter_mut().zip(p.pos_embed.row(idx)) {
                *t += e;
            }
        }
        Ok(tokens)
    }

    /// Runs the transformer blocks over embedded tokens.
    pub fn encode(&self, tokens: &Matrix, dropout: &mut Dropout) -> Result<(Matrix, Vec<BlockCache>, Option<LayerNormCache>)> {
        if tokens.cols() != self.config.dim {
            return Err(GcmaeError::shape(format!(
                "token dim {} but encoder dim {}",
                tokens.cols(),
                self.config.dim
            )));
        }
        let mut x = tokens.clone();
        let mut caches = Vec::with_capacity(self.params.blocks.len());
        for (i, block) in self.params.blocks.iter().enumerate() {
            let (y, c) = block.forward(&x, dropout);
            if !y.all_finite() {
                return Err(GcmaeError::NonFinite(format!("encoder block {i}")));
            }
            caches.push(c);
            x = y;
        }
        let norm_cache = match &self.params.norm {
            Some(norm) => {
                let (y, c) = norm.forward(&x);
                x = y;
                Some(c)
            }
            None => None,
        };
        Ok((x, caches, norm_cache))
    }

    /// Embed + encode the visible patches of one tile.
    pub fn forward(&self, patches: &PatchSeq, plan: &MaskPlan, dropout: &mut Dropout) -> Result<(EncoderOutput, EncoderCache)> {
        let mut tokens = self.embed_patches(patches, plan)?;
        let has_cls = self.params.cls_token.is_some();
        if let Some(cls) = &self.params.cls_token {
            let mut with_cls = Matrix::zeros(tokens.rows() + 1, tokens.cols());
            with_cls.row_mut(0).copy_from_slice(cls.row(0));
            for r in 0..tokens.rows() {
                with_cls.row_mut(r + 1).copy_from_slice(tokens.row(r));
            }
            tokens = with_cls;
        }
        let (out, blocks, norm) = self.encode(&tokens, dropout)?;
        let (latents, cls) = if has_cls {
            let idx: Vec<usize> = (1..out.rows()).collect();
            (out.select_rows(&idx), Some(out.row(0).to_vec()))
        } else {
            (out, None)
        };
        Ok((
            EncoderOutput {
                latents: LatentSeq {
                    vectors: latents,
                    visible: plan.visible.clone(),
                },
                cls,
            },
            EncoderCache {
                patches_vis: patches.patches.select_rows(&plan.visible),
                visible: plan.visible.clone(),
                blocks,
                norm,
            },
        ))
    }

    /// Accumulates parameter gradients from `d_latents` (and the class-token
    /// output gradient, if any).
    pub fn backward(&self, cache: &EncoderCache, d_latents: &Matrix, d_cls: Option<&[f64]>, grads: &mut EncoderParams) {
        let p = &self.params;
        let has_cls = p.cls_token.is_some();
        let offset = usize::from(has_cls);
        let mut dx = Matrix::zeros(d_latents.rows() + offset, d_latents.cols());
        if let Some(dc) = d_cls {
            dx.row_mut(0).copy_from_slice(dc);
        }
        for r in 0..d_latents.rows() {
            dx.row_mut(r + offset).copy_from_slice(d_latents.row(r));
        }
        if let (Some(norm), Some(nc), Some(gn)) = (&p.norm, &cache.norm, grads.norm.as_mut()) {
            dx = norm.backward(nc, &dx, gn);
        }
        for (i, block) in p.blocks.iter().enumerate().rev() {
            dx = block.backward(&cache.blocks[i], &dx, &mut grads.blocks[i]);
        }
        if let Some(gc) = grads.cls_token.as_mut() {
            for (g, d) in gc.as_mut_slice().iter_mut().zip(dx.row(0)) {
                *g += d;
            }
        }
        let dtokens = if has_cls {
            dx.select_rows(&(1..dx.rows()).collect::<Vec<_>>())
        } else {
            dx
        };
        for (i, &idx) in cache.visible.iter().enumerate() {
            for (g, d) in grads.pos_embed.row_mut(idx).iter_mut().zip(dtokens.row(i)) {
                *g += d;
            }
        }
        p.patch_embed.backward(&cache.patches_vis, &dtokens, &mut grads.patch_embed);
    }

    /// Per-tile feature according to the configured pooling.
    pub fn feature(&self, output: &EncoderOutput) -> Result<TileFeature> {
        match (&self.config.pooling, &output.cls) {
            (Pooling::ClassToken, Some(cls)) => normalize(cls).map(TileFeature),
            _ => pool_latent(&output.latents),
        }
    }

    /// Gradient of the feature w.r.t. the encoder outputs:
    /// `(d_latents, d_cls)`.
    pub fn feature_backward(&self, output: &EncoderOutput, d_feature: &[f64]) -> (Matrix, Option<Vec<f64>>) {
        let lat = &output.latents.vectors;
        match (&self.config.pooling, &output.cls) {
            (Pooling::ClassToken, Some(cls)) => (Matrix::zeros(lat.rows(), lat.cols()), Some(normalize_backward(cls, d_feature))),
            _ => (pool_latent_backward(lat, d_feature), None),
        }
    }
}

fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !n.is_finite() {
        return Err(GcmaeError::NonFinite("pooled feature".into()));
    }
    if n == 0.0 {
        return Err(GcmaeError::ZeroNorm("pooled feature".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backprop through `v = u / ‖u‖`: `du = (dv − v (v·dv)) / ‖u‖`.
fn normalize_backward(u: &[f64], dv: &[f64]) -> Vec<f64> {
    let n = l2_norm(u);
    let v: Vec<f64> = u.iter().map(|x| x / n).collect();
    let proj: f64 = v.iter().zip(dv).map(|(a, b)| a * b).sum();
    dv.iter().zip(&v).map(|(d, vi)| (d - vi * proj) / n).collect()
}

fn row_mean(m: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (a, b) in mean.iter_mut().zip(m.row(r)) {
            *a += b;
        }
    }
    let n = m.rows() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

/// Mean over rows followed by L2 normalization.
pub fn pool_latent(seq: &LatentSeq) -> Result<TileFeature> {
    if seq.vectors.rows() == 0 {
        return Err(GcmaeError::Empty("latent sequence".into()));
    }
    normalize(&row_mean(&seq.vectors)).map(TileFeature)
}

/// Gradient of [`pool_latent`] w.r.t. each latent row.
pub fn pool_latent_backward(latents: &Matrix, d_feature: &[f64]) -> Matrix {
    let du = normalize_backward(&row_mean(latents), d_feature);
    let n = latents.rows() as f64;
    let mut d = Matrix::zeros(latents.rows(), latents.cols());
    for r in 0..latents.rows() {
        for (a, b) in d.row_mut(r).iter_mut().zip(&du) {
            *a = b / n;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gelu, LAYER_NORM_EPS};
    use crate::patching::{patchify, sample_mask, Tile};
    use crate::rng;

    fn cfg(depth: usize, dim: usize, heads: usize) -> EncoderConfig {
        EncoderConfig {
            tile_size: 8,
            channels: 1,
            patch_size: 4,
            dim,
            depth,
            heads,
            mlp_ratio: 2.0,
            dropout: 0.0,
            pooling: Pooling::Mean,
            final_norm: false,
        }
    }

    fn random_patches(seed: u64, c: &EncoderConfig) -> PatchSeq {
        let mut r = rng::stream(seed, "enc-test-px", 0);
        let n = c.tile_size * c.tile_size * c.channels;
        let px = (0..n).map(|_| rng::unit_f64(&mut r) - 0.5).collect();
        patchify(&Tile::new(0, c.tile_size, c.tile_size, c.channels, px).unwrap(), c.patch_size).unwrap()
    }

    #[test]
    fn zero_patches_give_positional_rows() {
        let c = cfg(1, 8, 2);
        let mut enc = Encoder::new(c.clone(), &mut rng::stream(0, "enc", 0)).unwrap();
        enc.params.patch_embed.bias.fill(0.0);
        let patches = PatchSeq {
            patches: Matrix::zeros(4, 16),
            patch_size: 4,
            channels: 1,
            grid: (2, 2),
        };
        let plan = sample_mask(4, 0.5, 3).unwrap();
        let tokens = enc.embed_patches(&patches, &plan).unwrap();
        assert_eq!(tokens, enc.params.pos_embed.select_rows(&plan.visible));
    }

    #[test]
    fn identity_projection_adds_position() {
        let c = cfg(0, 16, 1);
        let mut enc = Encoder::new(c.clone(), &mut rng::stream(0, "enc", 1)).unwrap();
        let mut eye = Matrix::zeros(16, 16);
        for i in 0..16 {
            eye.set(i, i, 1.0);
        }
        enc.params.patch_embed.weight = eye;
        let patches = random_patches(1, &c);
        let plan = MaskPlan::full(4);
        let tokens = enc.embed_patches(&patches, &plan).unwrap();
        let mut expect = patches.patches.clone();
        expect.add_assign(&enc.params.pos_embed);
        assert!(tokens.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn embedding_matches_direct_matmul() {
        let c = cfg(1, 8, 2);
        let mut r = rng::stream(2, "enc", 2);
        let mut enc = Encoder::new(c.clone(), &mut r).unwrap();
        enc.params.patch_embed.bias = Matrix::uniform(1, 8, 1.0, &mut r);
        let patches = random_patches(2, &c);
        let plan = sample_mask(4, 0.25, 9).unwrap();
        let tokens = enc.embed_patches(&patches, &plan).unwrap();
        for (i, &idx) in plan.visible.iter().enumerate() {
            for j in 0..8 {
                let mut s = enc.params.patch_embed.bias.get(0, j) + enc.params.pos_embed.get(idx, j);
                for k in 0..16 {
                    s += patches.patches.get(idx, k) * enc.params.patch_embed.weight.get(k, j);
                }
                assert!((tokens.get(i, j) - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn embed_rejects_mismatched_plan() {
        let c = cfg(1, 8, 2);
        let enc = Encoder::new(c.clone(), &mut rng::stream(0, "enc", 3)).unwrap();
        let patches = random_patches(0, &c);
        let plan = MaskPlan::full(9);
        assert!(matches!(enc.embed_patches(&patches, &plan), Err(GcmaeError::DimensionMismatch(_))));
    }

    #[test]
    fn depth_zero_is_identity() {
        let c = cfg(0, 8, 2);
        let enc = Encoder::new(c, &mut rng::stream(0, "enc", 4)).unwrap();
        let tokens = Matrix::uniform(3, 8, 1.0, &mut rng::stream(0, "tok", 0));
        let (out, _, _) = enc.encode(&tokens, &mut Dropout::disabled()).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn single_token_block_matches_closed_form() {
        // One key: softmax weight 1, so attention output = v·Wo + bo.
        let c = cfg(1, 4, 1);
        let enc = Encoder::new(c, &mut rng::stream(1, "enc", 5)).unwrap();
        let b = &enc.params.blocks[0];
        let x: Vec<f64> = vec![0.3, -1.2, 0.7, 0.1];
        let ln = |v: &[f64], g: &Matrix, s: &Matrix| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
            v.iter()
                .enumerate()
                .map(|(i, a)| (a - m) / (var + LAYER_NORM_EPS).sqrt() * g.get(0, i) + s.get(0, i))
                .collect()
        };
        let lin = |v: &[f64], l: &Linear| -> Vec<f64> {
            (0..l.out_dim())
                .map(|j| l.bias.get(0, j) + v.iter().enumerate().map(|(i, a)| a * l.weight.get(i, j)).sum::<f64>())
                .collect()
        };
        let a_in = ln(&x, &b.norm1.gain, &b.norm1.shift);
        let qkv = lin(&a_in, &b.attn.qkv);
        let attn = lin(&qkv[8..12], &b.attn.proj);
        let h: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let m_in = ln(&h, &b.norm2.gain, &b.norm2.shift);
        let hidden: Vec<f64> = lin(&m_in, &b.mlp.fc1).into_iter().map(gelu).collect();
        let m = lin(&hidden, &b.mlp.fc2);
        let expect: Vec<f64> = h.iter().zip(&m).map(|(a, b)| a + b).collect();
        let (out, _, _) = enc.encode(&Matrix::row_vector(x), &mut Dropout::disabled()).unwrap();
        for (o, e) in out.as_slice().iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let c = cfg(2, 8, 2);
        let enc = Encoder::new(c, &mut rng::stream(3, "enc", 6)).unwrap();
        let tokens = Matrix::uniform(4, 8, 1.0, &mut rng::stream(3, "tok", 0));
        let perm = [2, 0, 3, 1];
        let (out, _, _) = enc.encode(&tokens, &mut Dropout::disabled()).unwrap();
        let (pout, _, _) = enc.encode(&tokens.select_rows(&perm), &mut Dropout::disabled()).unwrap();
        assert!(pout.max_abs_diff(&out.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let c = EncoderConfig {
            final_norm: true,
            ..cfg(2, 8, 2)
        };
        let enc = Encoder::new(c.clone(), &mut rng::stream(4, "enc", 7)).unwrap();
        let patches = random_patches(4, &c);
        let plan = sample_mask(4, 0.5, 1).unwrap();
        let (a, _) = enc.forward(&patches, &plan, &mut Dropout::disabled()).unwrap();
        let (b, _) = enc.forward(&patches, &plan, &mut Dropout::disabled()).unwrap();
        assert_eq!(a.latents, b.latents);
        assert_eq!(a.latents.vectors.rows(), plan.visible.len());
    }

    #[test]
    fn non_finite_activation_names_block() {
        let c = cfg(2, 8, 2);
        let mut enc = Encoder::new(c, &mut rng::stream(5, "enc", 8)).unwrap();
        enc.params.blocks[1].mlp.fc2.bias.set(0, 0, f64::NAN);
        let tokens = Matrix::uniform(2, 8, 1.0, &mut rng::stream(5, "tok", 0));
        match enc.encode(&tokens, &mut Dropout::disabled()) {
            Err(GcmaeError::NonFinite(msg)) => assert!(msg.contains("block 1")),
            _ => panic!("expected non-finite error"),
        }
    }

    #[test]
    fn pooling_cases() {
        let u = vec![0.6, 0.8];
        let seq = LatentSeq {
            vectors: Matrix::from_rows(&[u.clone(), u.clone(), u.clone()]),
            visible: vec![0, 1, 2],
        };
        let f = pool_latent(&seq).unwrap();
        assert!(f.0.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-15));

        let seq = LatentSeq {
            vectors: Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]),
            visible: vec![0, 1],
        };
        let f = pool_latent(&seq).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((f.0[0] - s).abs() < 1e-15 && (f.0[1] - s).abs() < 1e-15 && f.0[2] == 0.0);

        let empty = LatentSeq {
            vectors: Matrix::zeros(0, 3),
            visible: vec![],
        };
        assert!(matches!(pool_latent(&empty), Err(GcmaeError::Empty(_))));
        let zero = LatentSeq {
            vectors: Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]),
            visible: vec![0, 1],
        };
        assert!(matches!(pool_latent(&zero), Err(GcmaeError::ZeroNorm(_))));
    }

    #[test]
    fn pooled_norm_is_one() {
        let mut r = rng::stream(6, "pool", 0);
        for _ in 0..50 {
            let seq = LatentSeq {
                vectors: Matrix::uniform(5, 7, 3.0, &mut r),
                visible: (0..5).collect(),
            };
            let f = pool_latent(&seq).unwrap();
            assert!((l2_norm(&f.0) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_backward_matches_difference() {
        let mut r = rng::stream(7, "pool", 1);
        let lat = Matrix::uniform(3, 4, 1.0, &mut r);
        let w = [0.3, -0.5, 0.9, 0.2];
        let f = |m: &Matrix| -> f64 {
            let seq = LatentSeq {
                vectors: m.clone(),
                visible: vec![0, 1, 2],
            };
            pool_latent(&seq).unwrap().0.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let g = pool_latent_backward(&lat, &w);
        for i in 0..lat.len() {
            let mut p = lat.clone();
            p.as_mut_slice()[i] += 1e-6;
            let mut m = lat.clone();
            m.as_mut_slice()[i] -= 1e-6;
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((num - g.as_slice()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn class_token_pooling_uses_cls_output() {
        let c = EncoderConfig {
            pooling: Pooling::ClassToken,
            ..cfg(1, 8, 2)
        };
        let enc = Encoder::new(c.clone(), &mut rng::stream(8, "enc", 9)).unwrap();
        let patches = random_patches(8, &c);
        let plan = sample_mask(4, 0.5, 2).unwrap();
        let (out, _) = enc.forward(&patches, &plan, &mut Dropout::disabled()).unwrap();
        assert_eq!(out.latents.vectors.rows(), 2);
        let f = enc.feature(&out).unwrap();
        let cls = out.cls.as_ref().unwrap();
        let n = l2_norm(cls);
        assert!(f.0.iter().zip(cls).all(|(a, b)| (a - b / n).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_config() {
        let bad = EncoderConfig {
            dim: 10,
            heads: 4,
            ..EncoderConfig::default()
        };
        assert!(Encoder::new(bad, &mut rng::stream(0, "x", 0)).is_err());
        assert_eq!(EncoderConfig::vit_base().n_patches(), 196);
        assert_eq!(EncoderConfig::vit_base().patch_dim(), 768);
    }
}
