//! Per-sample feature memory with momentum mixing, negative sampling and
//! the InfoNCE objective.
//!
//! The bank stores one unit-norm row per training sample. During a step the
//! rows for the batch serve as positive keys and a uniformly drawn set of
//! other rows serve as negatives; only after the loss is computed are the
//! batch rows mixed with the new features:
//!
//! ```text
//! row ← normalize(m · feature + (1 − m) · row)
//! ```
//!
//! Keys and negatives are constants for the optimizer (no gradient flows
//! into the bank).

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GcmaeError, Result};
use crate::rng;
use crate::tensor::{dot, l2_norm, Matrix};

pub const DEFAULT_MOMENTUM: f64 = 0.5;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_NEGATIVES: usize = 8192;

/// Mixtures with norm at or below this are treated as singular.
const SINGULAR_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub table: Matrix,
    /// Epoch in which each row was last written; `None` for the random init.
    pub epoch_tag: Vec<Option<u64>>,
    /// Weight `m` of the incoming feature in the mixture.
    pub momentum: f64,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.table.row(id)
    }

    /// Copies of the rows for `ids`, the positive keys of a batch.
    pub fn keys(&self, ids: &[usize]) -> Result<Matrix> {
        for &id in ids {
            self.check_id(id)?;
        }
        Ok(self.table.select_rows(ids))
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.len() {
            return Err(GcmaeError::IdOutOfRange { id, size: self.len() });
        }
        Ok(())
    }
}

/// Bank of `m` i.i.d. uniformly random unit vectors (normalized Gaussians).
pub fn init_bank(m: usize, dim: usize, seed: u64) -> Result<MemoryBank> {
    if m == 0 || dim == 0 {
        return Err(GcmaeError::Empty(format!("bank of {m} x {dim}")));
    }
    let mut stream = rng::stream(seed, "bank-init", 0);
    let mut table = Matrix::zeros(m, dim);
    for r in 0..m {
        loop {
            let row = table.row_mut(r);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut stream);
            }
            let n = l2_norm(row);
            if n > SINGULAR_NORM {
                row.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }
    Ok(MemoryBank {
        table,
        epoch_tag: vec![None; m],
        momentum: DEFAULT_MOMENTUM,
    })
}

/// Mixes `features` (one row per id) into the bank. The whole batch is
/// validated before any row is written, so on error the bank is unchanged.
pub fn momentum_update(bank: &mut MemoryBank, ids: &[usize], features: &Matrix, epoch: u64) -> Result<()> {
    if features.rows() != ids.len() || features.cols() != bank.dim() {
        return Err(GcmaeError::shape(format!(
            "{} ids with features {:?}, bank dim {}",
            ids.len(),
            features.shape(),
            bank.dim()
        )));
    }
    let mut seen = std::collections::HashSet::with_capacity(ids.len());
    for &id in ids {
        bank.check_id(id)?;
        if !seen.insert(id) {
            return Err(GcmaeError::DuplicateId(id));
        }
    }
    let m = bank.momentum;
    let mut new_rows = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        let mixed: Vec<f64> = features
            .row(i)
            .iter()
            .zip(bank.row(id))
            .map(|(f, o)| m * f + (1.0 - m) * o)
            .collect();
        let n = l2_norm(&mixed);
        if !n.is_finite() {
            return Err(GcmaeError::NonFinite(format!("bank mixture for id {id}")));
        }
        if n <= SINGULAR_NORM {
            return Err(GcmaeError::ZeroNorm(format!("bank mixture for id {id}")));
        }
        new_rows.push(mixed.into_iter().map(|v| v / n).collect::<Vec<_>>());
    }
    for (&id, row) in ids.iter().zip(new_rows) {
        bank.table.row_mut(id).copy_from_slice(&row);
        bank.epoch_tag[id] = Some(epoch);
    }
    Ok(())
}

/// Indices of `k` distinct rows drawn uniformly without replacement from
/// the rows not listed in `exclude`.
pub fn sample_negative_ids<R: RngCore + ?Sized>(bank_len: usize, k: usize, exclude: &[usize], stream: &mut R) -> Result<Vec<usize>> {
    let mut excluded = vec![false; bank_len];
    for &e in exclude {
        if e >= bank_len {
            return Err(GcmaeError::IdOutOfRange { id: e, size: bank_len });
        }
        excluded[e] = true;
    }
    let mut pool: Vec<usize> = (0..bank_len).filter(|&i| !excluded[i]).collect();
    if k > pool.len() {
        return Err(GcmaeError::TooManyNegatives {
            requested: k,
            available: pool.len(),
        });
    }
    Ok(rng::partial_shuffle(&mut pool, k, stream))
}

/// `k × D` negatives for a batch (see [`sample_negative_ids`]).
pub fn sample_negatives<R: RngCore + ?Sized>(bank: &MemoryBank, k: usize, exclude: &[usize], stream: &mut R) -> Result<Matrix> {
    let ids = sample_negative_ids(bank.len(), k, exclude, stream)?;
    Ok(bank.table.select_rows(&ids))
}

/// Queries, their positive keys and the shared negatives of one step.
#[derive(Clone, Debug)]
pub struct ContrastBatch {
    pub queries: Matrix,
    pub keys: Matrix,
    pub negatives: Matrix,
    pub temperature: f64,
}

impl ContrastBatch {
    fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(GcmaeError::InvalidTemperature(self.temperature));
        }
        if self.queries.shape() != self.keys.shape() {
            return Err(GcmaeError::shape("queries and keys differ in shape"));
        }
        if self.queries.rows() == 0 {
            return Err(GcmaeError::Empty("contrastive batch".into()));
        }
        if self.negatives.rows() == 0 {
            return Err(GcmaeError::Empty("negative set".into()));
        }
        if self.negatives.cols() != self.queries.cols() {
            return Err(GcmaeError::shape("negatives and queries differ in width"));
        }
        Ok(())
    }
}

/// Mean over queries of `−log(exp(q·k⁺/τ) / (exp(q·k⁺/τ) + Σ exp(q·k⁻/τ)))`.
pub fn info_nce(batch: &ContrastBatch) -> Result<f64> {
    info_nce_grad(batch).map(|(l, _)| l)
}

/// Loss and gradient w.r.t. the queries. Keys and negatives are treated as
/// constants.
pub fn info_nce_grad(batch: &ContrastBatch) -> Result<(f64, Matrix)> {
    batch.validate()?;
    let tau = batch.temperature;
    let (b, d) = batch.queries.shape();
    let neg_logits = batch.queries.matmul_t(&batch.negatives);
    let mut total = 0.0;
    let mut grad = Matrix::zeros(b, d);
    let mut logits = Vec::with_capacity(batch.negatives.rows() + 1);
    for i in 0..b {
        let q = batch.queries.row(i);
        let kp = batch.keys.row(i);
        logits.clear();
        logits.push(dot(q, kp) / tau);
        logits.extend(neg_logits.row(i).iter().map(|s| s / tau));
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(GcmaeError::NonFinite(format!("similarity for query {i}")));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - logits[0];

        // dℓ/dq = (Σ_j p_j k_j − k⁺) / τ
        let g = grad.row_mut(i);
        let p_pos = (logits[0] - lse).exp();
        for (gv, kv) in g.iter_mut().zip(kp) {
            *gv = (p_pos - 1.0) * kv;
        }
        for (j, l) in logits[1..].iter().enumerate() {
            let p = (l - lse).exp();
            for (gv, kv) in g.iter_mut().zip(batch.negatives.row(j)) {
                *gv += p * kv;
            }
        }
        let s = 1.0 / (tau * b as f64);
        g.iter_mut().for_each(|v| *v *= s);
    }
    Ok((total / b as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn init_rows_are_unit_and_deterministic() {
        let b = init_bank(1, 5, 3).unwrap();
        assert!((l2_norm(b.row(0)) - 1.0).abs() < 1e-6);
        let big = init_bank(8192, 128, 1).unwrap();
        assert!((0..8192).all(|r| (l2_norm(big.row(r)) - 1.0).abs() < 1e-6));
        assert_eq!(init_bank(50, 8, 9).unwrap(), init_bank(50, 8, 9).unwrap());
        assert_ne!(init_bank(50, 8, 9).unwrap(), init_bank(50, 8, 10).unwrap());
    }

    #[test]
    fn update_fixed_point() {
        let mut bank = init_bank(4, 3, 0).unwrap();
        let u = bank.row(2).to_vec();
        momentum_update(&mut bank, &[2], &Matrix::row_vector(u.clone()), 0).unwrap();
        assert!(bank.row(2).iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(bank.epoch_tag[2], Some(0));
        assert_eq!(bank.epoch_tag[0], None);
    }

    #[test]
    fn update_orthogonal_pair() {
        let mut bank = init_bank(2, 3, 0).unwrap();
        bank.table.row_mut(0).copy_from_slice(&e(1, 3));
        momentum_update(&mut bank, &[0], &Matrix::row_vector(e(0, 3)), 1).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let row = bank.row(0);
        assert!((row[0] - s).abs() < 1e-15 && (row[1] - s).abs() < 1e-15 && row[2] == 0.0);
    }

    #[test]
    fn update_antipodal_errors_and_leaves_row() {
        let mut bank = init_bank(2, 3, 0).unwrap();
        bank.table.row_mut(0).copy_from_slice(&[-1.0, 0.0, 0.0]);
        let before = bank.clone();
        let feats = Matrix::from_rows(&[before.row(1).to_vec(), e(0, 3)]);
        let err = momentum_update(&mut bank, &[1, 0], &feats, 0).unwrap_err();
        assert!(matches!(err, GcmaeError::ZeroNorm(_)));
        assert_eq!(bank, before);
    }

    #[test]
    fn update_rejects_bad_ids() {
        let mut bank = init_bank(2, 2, 0).unwrap();
        let f = Matrix::from_rows(&[e(0, 2), e(1, 2)]);
        assert!(matches!(
            momentum_update(&mut bank, &[0, 5], &f, 0),
            Err(GcmaeError::IdOutOfRange { id: 5, size: 2 })
        ));
        assert!(matches!(momentum_update(&mut bank, &[1, 1], &f, 0), Err(GcmaeError::DuplicateId(1))));
    }

    #[test]
    fn negatives_forced_set() {
        let mut s = rng::stream(0, "neg", 0);
        let mut ids = sample_negative_ids(3, 2, &[0], &mut s).unwrap();
        ids.sort_unstable();
        assert_eq!(ids, vec![1, 2]);
        assert!(matches!(
            sample_negative_ids(3, 3, &[0], &mut s),
            Err(GcmaeError::TooManyNegatives { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn negatives_are_distinct_at_full_scale() {
        let mut s = rng::stream(1, "neg", 0);
        let mut ids = sample_negative_ids(10_000, 8192, &[], &mut s).unwrap();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 8192);
    }

    #[test]
    fn negatives_exclude_batch() {
        let mut s = rng::stream(2, "neg", 0);
        let ids = sample_negative_ids(20, 15, &[3, 7, 11], &mut s).unwrap();
        assert!(ids.iter().all(|i| ![3, 7, 11].contains(i)));
    }

    fn batch(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, n: Vec<Vec<f64>>, tau: f64) -> ContrastBatch {
        ContrastBatch {
            queries: Matrix::from_rows(&q),
            keys: Matrix::from_rows(&k),
            negatives: Matrix::from_rows(&n),
            temperature: tau,
        }
    }

    #[test]
    fn nce_closed_forms() {
        let b = batch(vec![e(0, 3)], vec![e(0, 3)], vec![e(1, 3), e(2, 3)], 1.0);
        let expect = (1.0 + 2.0 * (-1f64).exp()).ln();
        assert!((info_nce(&b).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.5515).abs() < 1e-4);

        let b = batch(vec![e(0, 3)], vec![e(1, 3)], vec![e(2, 3), e(1, 3)], 1.0);
        assert!((info_nce(&b).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nce_rejects_bad_temperature() {
        let b = batch(vec![e(0, 2)], vec![e(0, 2)], vec![e(1, 2)], 0.0);
        assert!(matches!(info_nce(&b), Err(GcmaeError::InvalidTemperature(_))));
        let b = ContrastBatch {
            temperature: -1.0,
            ..b
        };
        assert!(info_nce(&b).is_err());
    }

    #[test]
    fn nce_non_finite_similarity() {
        let b = batch(vec![vec![f64::NAN, 0.0]], vec![e(0, 2)], vec![e(1, 2)], 0.5);
        assert!(matches!(info_nce(&b), Err(GcmaeError::NonFinite(_))));
    }

    #[test]
    fn nce_is_decreasing_in_positive_similarity() {
        let negs = vec![vec![0.0, 0.6, 0.8], vec![0.0, 1.0, 0.0]];
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let a = step as f64 * 0.15;
            let k = vec![a.cos(), 0.0, a.sin()];
            let l = info_nce(&batch(vec![e(0, 3)], vec![k], negs.clone(), 0.2)).unwrap();
            if step > 0 {
                assert!(l > last, "loss must grow as q·k⁺ shrinks");
            }
            last = l;
        }
    }

    #[test]
    fn nce_gradient_matches_difference() {
        let mut r = rng::stream(4, "nce", 0);
        let unit = |m: Matrix| {
            let mut m = m;
            for i in 0..m.rows() {
                let n = l2_norm(m.row(i));
                m.row_mut(i).iter_mut().for_each(|v| *v /= n);
            }
            m
        };
        let b = ContrastBatch {
            queries: unit(Matrix::uniform(3, 5, 1.0, &mut r)),
            keys: unit(Matrix::uniform(3, 5, 1.0, &mut r)),
            negatives: unit(Matrix::uniform(6, 5, 1.0, &mut r)),
            temperature: 0.3,
        };
        let (_, g) = info_nce_grad(&b).unwrap();
        for i in 0..b.queries.len() {
            let mut p = b.clone();
            p.queries.as_mut_slice()[i] += 1e-6;
            let mut m = b.clone();
            m.queries.as_mut_slice()[i] -= 1e-6;
            let num = (info_nce(&p).unwrap() - info_nce(&m).unwrap()) / 2e-6;
            let ana = g.as_slice()[i];
            assert!((num - ana).abs() / num.abs().max(1e-3) < 1e-4, "{num} vs {ana}");
        }
    }
}
