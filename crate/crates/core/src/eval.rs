//! Downstream evaluation: metrics, label-fraction subsampling, the linear
//! probe on frozen features and full fine-tuning.

use log::info;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{GcmaeError, Result};
use crate::nn::{join, Dropout, Linear, ParamTree};
use crate::optim::{optimizer_step, AdamWConfig, OptimState};
use crate::parallel::Execution;
use crate::patching::MaskPlan;
use crate::rng;
use crate::tensor::Matrix;
use crate::training::PreparedTile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Fraction of the labeled training split used, in (0, 1].
    pub fraction: f64,
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without improvement of the monitored loss before stopping.
    pub patience: usize,
    pub min_delta: f64,
    /// Seed of the subsample and of the head's batch order.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            fraction: 1.0,
            max_epochs: 200,
            lr: 1e-2,
            batch_size: 64,
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(GcmaeError::Config(format!("label fraction {} outside (0, 1]", self.fraction)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(GcmaeError::Config("probe batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-4,
            batch_size: 32,
            weight_decay: 0.05,
        }
    }
}

/// `100 · correct / total`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(GcmaeError::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(GcmaeError::Empty("accuracy over no examples".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Mann–Whitney AUC in percent; tied scores count ½.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(GcmaeError::shape("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GcmaeError::NonFinite("AUC scores".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GcmaeError::Undefined("AUC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(100.0 * u / (p * n))
}

/// AUC from per-class scores (`n × classes`). Two classes use column 1;
/// more are macro-averaged one-vs-rest over classes present in `labels`.
pub fn auc(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    if scores.rows() != labels.len() {
        return Err(GcmaeError::shape("score rows and labels differ in length"));
    }
    let k = scores.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(GcmaeError::shape(format!("label {bad} has no score column ({k} classes)")));
    }
    let column = |c: usize| -> Vec<f64> { (0..scores.rows()).map(|r| scores.get(r, c)).collect() };
    if k == 2 {
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc_binary(&column(1), &pos);
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..k {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if pos.iter().all(|&p| p) || !pos.iter().any(|&p| p) {
            continue;
        }
        total += auc_binary(&column(c), &pos)?;
        used += 1;
    }
    if used == 0 {
        return Err(GcmaeError::Undefined("AUC over a single class".into()));
    }
    Ok(total / used as f64)
}

/// Stratified subsample of `round(fraction · n)` indices. Per-class counts
/// are `⌊fraction · n_c⌋` or one more (largest remainder), so each differs
/// from `fraction · n_c` by less than one. Returned indices are sorted.
pub fn stratified_subsample(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GcmaeError::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members
            .get_mut(l)
            .ok_or_else(|| GcmaeError::Dataset(format!("label {l} outside {classes} classes")))?
            .push(i);
    }
    let total = (fraction * labels.len() as f64 + 0.5).floor() as usize;
    let exact: Vec<f64> = members.iter().map(|m| fraction * m.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..classes).collect();
    by_remainder.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let assigned: usize = quota.iter().sum();
    for &c in by_remainder.iter().take(total.saturating_sub(assigned)) {
        quota[c] += 1;
    }
    let mut picked = Vec::with_capacity(total);
    for (c, m) in members.iter_mut().enumerate() {
        if quota[c] == 0 {
            return Err(GcmaeError::ClassAbsent(c));
        }
        let mut r = rng::stream(seed, "subsample", c as u64);
        let k = quota[c].min(m.len());
        picked.extend(rng::partial_shuffle(m, k, &mut r));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Pooled features of every tile with all patches visible and no dropout.
pub fn extract_features(encoder: &Encoder, tiles: &[PreparedTile], exec: Execution) -> Result<Matrix> {
    let plan = MaskPlan::full(encoder.config.n_patches());
    let rows: Vec<Result<Vec<f64>>> = exec.map(tiles.len(), |i| {
        let (out, _) = encoder.forward(&tiles[i].input, &plan, &mut Dropout::disabled())?;
        Ok(encoder.feature(&out)?.0)
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, encoder.config.dim));
    }
    Ok(Matrix::from_rows(&rows))
}

fn labels_of(tiles: &[PreparedTile]) -> Result<Vec<usize>> {
    tiles
        .iter()
        .map(|t| t.label.ok_or_else(|| GcmaeError::Dataset(format!("tile {} has no label", t.id))))
        .collect()
}

/// Linear classifier on standardized features. `weight` is the row-major
/// `D × classes` matrix of [`ProbeHead::linear`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl ProbeHead {
    /// Zero-initialized head with standardization fitted on `features`.
    pub fn fit_standardizer(features: &Matrix, classes: usize) -> Self {
        let (n, d) = features.shape();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        Self {
            weight: vec![0.0; d * classes],
            bias: vec![0.0; classes],
            dim: d,
            classes,
            feature_mean: mean,
            feature_std: var.iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect(),
        }
    }

    pub fn linear(&self) -> Linear {
        Linear {
            weight: Matrix::from_vec(self.dim, self.classes, self.weight.clone()),
            bias: Matrix::from_vec(1, self.classes, self.bias.clone()),
        }
    }

    pub fn set_linear(&mut self, l: &Linear) {
        self.weight = l.weight.as_slice().to_vec();
        self.bias = l.bias.as_slice().to_vec();
    }

    pub fn standardize(&self, features: &Matrix) -> Matrix {
        let mut z = features.clone();
        for r in 0..z.rows() {
            for ((v, m), s) in z.row_mut(r).iter_mut().zip(&self.feature_mean).zip(&self.feature_std) {
                *v = (*v - m) / s;
            }
        }
        z
    }

    pub fn logits(&self, features: &Matrix) -> Matrix {
        self.linear().forward(&self.standardize(features))
    }

    pub fn probabilities(&self, features: &Matrix) -> Matrix {
        let mut p = self.logits(features);
        softmax_rows(&mut p);
        p
    }
}

fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut p = logits.clone();
    softmax_rows(&mut p);
    let mut loss = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        loss -= p.get(r, l).max(1e-300).ln();
        let v = p.get(r, l);
        p.set(r, l, v - 1.0);
    }
    p.scale(1.0 / n);
    (loss / n, p)
}

#[derive(Clone, Debug, Serialize)]
pub struct HeadFit {
    pub head: ProbeHead,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub stopped_on_plateau: bool,
}

/// Trains a softmax head on fixed features until the full-set loss stops
/// improving for `patience` epochs.
pub fn train_head(features: &Matrix, labels: &[usize], classes: usize, cfg: &ProbeConfig, init: Option<ProbeHead>) -> Result<HeadFit> {
    cfg.validate()?;
    if features.rows() != labels.len() || labels.is_empty() {
        return Err(GcmaeError::shape("features and labels differ in length or are empty"));
    }
    let mut head = init.unwrap_or_else(|| ProbeHead::fit_standardizer(features, classes));
    let z = head.standardize(features);
    let mut lin = head.linear();
    let mut opt = OptimState::new(
        &lin,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    let full_loss = |lin: &Linear| softmax_cross_entropy(&lin.forward(&z), labels).0;
    let mut best = full_loss(&lin);
    let mut wait = 0;
    let mut epochs_run = 0;
    let mut plateau = false;
    for epoch in 0..cfg.max_epochs {
        let order = rng::permutation(labels.len(), &mut rng::stream(cfg.seed, "probe-order", epoch as u64));
        for ids in order.chunks(cfg.batch_size) {
            let xb = z.select_rows(ids);
            let yb: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            let (_, dlogits) = softmax_cross_entropy(&lin.forward(&xb), &yb);
            let mut g = lin.zeros_like();
            lin.backward(&xb, &dlogits, &mut g);
            optimizer_step(&mut lin, &g, &mut opt)?;
        }
        epochs_run = epoch + 1;
        let loss = full_loss(&lin);
        if loss < best - cfg.min_delta {
            best = loss;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                plateau = true;
                break;
            }
        }
    }
    let final_loss = full_loss(&lin);
    info!("probe head: {epochs_run} epochs, loss {final_loss:.5}, plateau stop: {plateau}");
    head.set_linear(&lin);
    Ok(HeadFit {
        head,
        epochs_run,
        final_loss,
        stopped_on_plateau: plateau,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeOutcome {
    pub fit: HeadFit,
    /// Indices into the training tiles that formed the labeled subset.
    pub selected: Vec<usize>,
}

/// Linear probe on frozen features of a stratified subsample.
pub fn probe_train(encoder: &Encoder, train: &[PreparedTile], classes: usize, cfg: &ProbeConfig, exec: Execution) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let labels = labels_of(train)?;
    let selected = stratified_subsample(&labels, classes, cfg.fraction, cfg.seed)?;
    let subset: Vec<PreparedTile> = selected.iter().map(|&i| train[i].clone()).collect();
    let features = extract_features(encoder, &subset, exec)?;
    let sub_labels: Vec<usize> = selected.iter().map(|&i| labels[i]).collect();
    let fit = train_head(&features, &sub_labels, classes, cfg, None)?;
    Ok(ProbeOutcome { fit, selected })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub accuracy: f64,
    /// Percent.
    pub auc: f64,
    pub n_eval: usize,
    pub label_fraction: f64,
    pub split_seed: u64,
    pub mode: String,
    /// Mask ratio of the pretraining run the encoder came from.
    pub pretrain_mask_ratio: Option<f64>,
    pub pretrain_checkpoint_sha256: Option<String>,
}

/// Accuracy and AUC (both percent) of `head` on precomputed features.
pub fn score_features(head: &ProbeHead, features: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    let probs = head.probabilities(features);
    let preds: Vec<usize> = (0..probs.rows()).map(|r| argmax(probs.row(r))).collect();
    Ok((accuracy(&preds, labels)?, auc(&probs, labels)?))
}

/// Accuracy and AUC (both percent) of `head` on `tiles`.
pub fn evaluate(encoder: &Encoder, head: &ProbeHead, tiles: &[PreparedTile], exec: Execution) -> Result<(f64, f64)> {
    let labels = labels_of(tiles)?;
    score_features(head, &extract_features(encoder, tiles, exec)?, &labels)
}

/// Encoder plus classifier, all trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: Linear,
}

impl ParamTree for Classifier {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.encoder.params.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.encoder.params.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Mean cross-entropy of the classifier over `ids` and its gradient.
fn classifier_grad(model: &Classifier, head: &ProbeHead, tiles: &[PreparedTile], ids: &[usize], exec: Execution) -> Result<(f64, Classifier)> {
    let plan = MaskPlan::full(model.encoder.config.n_patches());
    let scale = 1.0 / ids.len() as f64;
    let per_tile = |k: usize| -> Result<(f64, Classifier)> {
        let tile = &tiles[ids[k]];
        let label = tile.label.ok_or_else(|| GcmaeError::Dataset(format!("tile {} has no label", tile.id)))?;
        let (out, cache) = model.encoder.forward(&tile.input, &plan, &mut Dropout::disabled())?;
        let feat = Matrix::row_vector(model.encoder.feature(&out)?.0);
        let z = head.standardize(&feat);
        let (loss, mut dlogits) = softmax_cross_entropy(&model.head.forward(&z), &[label]);
        dlogits.scale(scale);
        let mut g = model.zeros_like();
        let dz = model.head.backward(&z, &dlogits, &mut g.head);
        let dfeat: Vec<f64> = dz.row(0).iter().zip(&head.feature_std).map(|(d, s)| d / s).collect();
        let (dlat, dcls) = model.encoder.feature_backward(&out, &dfeat);
        model.encoder.backward(&cache, &dlat, dcls.as_deref(), &mut g.encoder.params);
        Ok((loss * scale, g))
    };
    exec.map_reduce(ids.len(), per_tile, |acc, next| {
        if acc.is_err() {
            return;
        }
        match next {
            Err(e) => *acc = Err(e),
            Ok((l, g)) => {
                let (sum, grads) = acc.as_mut().expect("checked above");
                *sum += l;
                grads.tree_add(&g);
            }
        }
    })
    .ok_or_else(|| GcmaeError::Empty("fine-tuning batch".into()))?
}

/// Fine-tunes encoder and head together, starting from `head` (typically
/// the probe's). Standardization constants stay fixed. Zero epochs
/// returns the inputs unchanged.
pub fn fine_tune(
    encoder: &Encoder,
    head: &ProbeHead,
    train: &[PreparedTile],
    cfg: &FineTuneConfig,
    seed: u64,
    exec: Execution,
) -> Result<(Encoder, ProbeHead)> {
    if train.is_empty() {
        return Err(GcmaeError::Empty("fine-tuning set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(GcmaeError::Config("fine-tune batch size must be positive".into()));
    }
    let mut model = Classifier {
        encoder: encoder.clone(),
        head: head.linear(),
    };
    let mut opt = OptimState::new(
        &model,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    for epoch in 0..cfg.epochs {
        let order = rng::permutation(train.len(), &mut rng::stream(seed, "finetune-order", epoch as u64));
        let mut epoch_loss = 0.0;
        for ids in order.chunks(cfg.batch_size) {
            let (loss, g) = classifier_grad(&model, head, train, ids, exec)?;
            optimizer_step(&mut model, &g, &mut opt)?;
            epoch_loss += loss * ids.len() as f64;
        }
        info!("fine-tune epoch {epoch}: loss {:.5}", epoch_loss / train.len() as f64);
    }
    let mut out_head = head.clone();
    out_head.set_linear(&model.head);
    Ok((model.encoder, out_head))
}
