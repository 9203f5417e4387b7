//! Joint objective: weighted sum of reconstruction and contrastive losses.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{GcmaeError, Result};

pub const DEFAULT_LAMBDA1: f64 = 1.0;
pub const DEFAULT_LAMBDA2: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_mse: f64,
    pub l_nce: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

pub fn combined_loss(l_mse: f64, l_nce: f64, lambda1: f64, lambda2: f64) -> Result<LossReport> {
    for (name, v) in [("l_mse", l_mse), ("l_nce", l_nce), ("lambda1", lambda1), ("lambda2", lambda2)] {
        if !v.is_finite() {
            return Err(GcmaeError::NonFinite(name.into()));
        }
    }
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(GcmaeError::Config(format!(
            "loss weights must be non-negative, got ({lambda1}, {lambda2})"
        )));
    }
    Ok(LossReport {
        step: 0,
        l_mse,
        l_nce,
        lambda1,
        lambda2,
        total: lambda1 * l_mse + lambda2 * l_nce,
    })
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_mse,l_nce,total";

    pub fn with_step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    /// `step,l_mse,l_nce,total` with round-trip float formatting.
    pub fn csv_row(&self) -> String {
        format!("{},{:?},{:?},{:?}", self.step, self.l_mse, self.l_nce, self.total)
    }

    pub fn append_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{}", self.csv_row())
    }
}
