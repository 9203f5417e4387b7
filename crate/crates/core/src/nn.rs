//! Transformer building blocks with explicit forward caches and backward passes.
//!
//! Every layer's parameters double as its gradient accumulator: `backward`
//! takes a `grads` value of the same type (see [`ParamTree::zeros_like`]) and
//! adds into it.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::rng::{self, StreamRng};
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// A tree of named parameter tensors.
pub trait ParamTree: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix));

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, m| m.fill(0.0));
        z
    }

    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, m| out.push((n, m)));
        out
    }

    fn tree_add(&mut self, other: &Self) {
        let theirs: Vec<&Matrix> = other.named().into_iter().map(|(_, m)| m).collect();
        let mut i = 0;
        self.visit_mut("", &mut |_, m| {
            m.add_assign(theirs[i]);
            i += 1;
        });
    }

    fn tree_scale(&mut self, s: f64) {
        self.visit_mut("", &mut |_, m| m.scale(s));
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// All parameters concatenated in visit order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, m| {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Inverted dropout source. Disabled (identity) in eval mode or at rate 0.
pub struct Dropout {
    rate: f64,
    rng: Option<StreamRng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: StreamRng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    fn mask(&mut self, n: usize) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.rate;
        Some(
            (0..n)
                .map(|_| if rng::unit_f64(rng) < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    }
}

fn apply_mask(m: &mut Matrix, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (v, k) in m.as_mut_slice().iter_mut().zip(mask) {
            *v *= k;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Linear {
    pub fn new<R: RngCore>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::xavier(fan_in, fan_out, rng),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        y.add_row_broadcast(&self.bias);
        y
    }

    /// Accumulates parameter grads and returns `dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grads: &mut Linear) -> Matrix {
        x.t_matmul_acc(dy, &mut grads.weight);
        dy.accumulate_col_sums(&mut grads.bias);
        dy.matmul_t(&self.weight)
    }
}

impl ParamTree for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub shift: Matrix,
}

pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Matrix::filled(1, dim, 1.0),
            shift: Matrix::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let d = x.cols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut y = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
            let yr = y.row_mut(r);
            for (c, out) in yr.iter_mut().enumerate() {
                *out = xhat.get(r, c) * self.gain.get(0, c) + self.shift.get(0, c);
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Matrix, grads: &mut LayerNorm) -> Matrix {
        let (n, d) = dy.shape();
        let mut dx = Matrix::zeros(n, d);
        let mut dxhat = vec![0.0; d];
        for r in 0..n {
            let xh = cache.xhat.row(r);
            let dyr = dy.row(r);
            for c in 0..d {
                grads.gain.as_mut_slice()[c] += dyr[c] * xh[c];
                grads.shift.as_mut_slice()[c] += dyr[c];
                dxhat[c] = dyr[c] * self.gain.get(0, c);
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[r];
            for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        dx
    }
}

impl ParamTree for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "shift"), &self.shift);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "shift"), &mut self.shift);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    x: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl Mlp {
    pub fn new<R: RngCore>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, MlpCache) {
        let pre = self.fc1.forward(x);
        let mut act = pre.clone();
        act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.fc2.forward(&act);
        (y, MlpCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Matrix, grads: &mut Mlp) -> Matrix {
        let mut dact = self.fc2.backward(&cache.act, dy, &mut grads.fc2);
        for (d, &p) in dact.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *d *= gelu_grad(p);
        }
        self.fc1.backward(&cache.x, &dact, &mut grads.fc1)
    }
}

impl ParamTree for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
}

pub struct AttentionCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// One `n × n` row-softmax matrix per head.
    probs: Vec<Matrix>,
    mixed: Matrix,
}

fn head_slice(m: &Matrix, h: usize, dh: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), dh);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn scatter_head(into: &mut Matrix, part: &Matrix, h: usize, dh: usize) {
    for r in 0..part.rows() {
        into.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(part.row(r));
    }
}

fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

impl Attention {
    pub fn new<R: RngCore>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim must be divisible by heads");
        Self {
            heads,
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
        }
    }

    fn dim(&self) -> usize {
        self.proj.in_dim()
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, AttentionCache) {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let n = x.rows();
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut v = Matrix::zeros(n, d);
        for r in 0..n {
            let row = qkv.row(r);
            q.row_mut(r).copy_from_slice(&row[..d]);
            k.row_mut(r).copy_from_slice(&row[d..2 * d]);
            v.row_mut(r).copy_from_slice(&row[2 * d..]);
        }
        let mut mixed = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (head_slice(&q, h, dh), head_slice(&k, h, dh), head_slice(&v, h, dh));
            let mut s = qh.matmul_t(&kh);
            s.scale(scale);
            softmax_rows(&mut s);
            scatter_head(&mut mixed, &s.matmul(&vh), h, dh);
            probs.push(s);
        }
        let y = self.proj.forward(&mixed);
        (
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                mixed,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache, dy: &Matrix, grads: &mut Attention) -> Matrix {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = dy.rows();
        let dmixed = self.proj.backward(&cache.mixed, dy, &mut grads.proj);
        let mut dqkv = Matrix::zeros(n, 3 * d);
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let (qh, kh, vh) = (
                head_slice(&cache.q, h, dh),
                head_slice(&cache.k, h, dh),
                head_slice(&cache.v, h, dh),
            );
            let dout = head_slice(&dmixed, h, dh);
            let dp = dout.matmul_t(&vh);
            let mut dvh = Matrix::zeros(n, dh);
            p.t_matmul_acc(&dout, &mut dvh);
            let mut ds = Matrix::zeros(n, n);
            for r in 0..n {
                let pr = p.row(r);
                let dpr = dp.row(r);
                let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for (c, out) in ds.row_mut(r).iter_mut().enumerate() {
                    *out = pr[c] * (dpr[c] - inner) * scale;
                }
            }
            let dqh = ds.matmul(&kh);
            let mut dkh = Matrix::zeros(n, dh);
            ds.t_matmul_acc(&qh, &mut dkh);
            for r in 0..n {
                let row = dqkv.row_mut(r);
                row[h * dh..(h + 1) * dh].copy_from_slice(dqh.row(r));
                row[d + h * dh..d + (h + 1) * dh].copy_from_slice(dkh.row(r));
                row[2 * d + h * dh..2 * d + (h + 1) * dh].copy_from_slice(dvh.row(r));
            }
        }
        self.qkv.backward(&cache.x, &dqkv, &mut grads.qkv)
    }
}

impl ParamTree for Attention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Block ordering; only pre-norm is implemented and it is recorded in run metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockOrder {
    PreNorm,
}

/// Pre-norm transformer block: `h = x + Attn(LN(x))`, `y = h + MLP(LN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    drop1: Option<Vec<f64>>,
    ln2: LayerNormCache,
    mlp: MlpCache,
    drop2: Option<Vec<f64>>,
}

impl Block {
    pub fn new<R: RngCore>(dim: usize, heads: usize, mlp_ratio: f64, rng: &mut R) -> Self {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, hidden, rng),
        }
    }

    pub fn forward(&self, x: &Matrix, dropout: &mut Dropout) -> (Matrix, BlockCache) {
        let (a_in, ln1) = self.norm1.forward(x);
        let (mut a, attn) = self.attn.forward(&a_in);
        let drop1 = dropout.mask(a.len());
        apply_mask(&mut a, &drop1);
        let mut h = x.clone();
        h.add_assign(&a);
        let (m_in, ln2) = self.norm2.forward(&h);
        let (mut m, mlp) = self.mlp.forward(&m_in);
        let drop2 = dropout.mask(m.len());
        apply_mask(&mut m, &drop2);
        h.add_assign(&m);
        (
            h,
            BlockCache {
                ln1,
                attn,
                drop1,
                ln2,
                mlp,
                drop2,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Matrix, grads: &mut Block) -> Matrix {
        let mut dm = dy.clone();
        apply_mask(&mut dm, &cache.drop2);
        let dm_in = self.mlp.backward(&cache.mlp, &dm, &mut grads.mlp);
        let mut dh = dy.clone();
        dh.add_assign(&self.norm2.backward(&cache.ln2, &dm_in, &mut grads.norm2));
        let mut da = dh.clone();
        apply_mask(&mut da, &cache.drop1);
        let da_in = self.attn.backward(&cache.attn, &da, &mut grads.attn);
        dh.add_assign(&self.norm1.backward(&cache.ln1, &da_in, &mut grads.norm1));
        dh
    }
}

impl ParamTree for Block {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

impl<T: ParamTree> ParamTree for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
