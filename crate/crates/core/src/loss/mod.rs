//! Count error, optimal-transport loss and evaluation metrics.

mod exact;
mod ot;

pub use exact::{exact_ot_oracle, hungarian, MAX_ATOMS, MAX_SUPPORT};
pub use ot::{ground_cost, ot_gradient, ot_loss, OtReport, SinkhornConfig};

use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountLoss {
    #[default]
    L1,
    L2,
}

pub fn count_loss(pred: f64, gt: f64, mode: CountLoss) -> f64 {
    let d = pred - gt;
    match mode {
        CountLoss::L1 => d.abs(),
        CountLoss::L2 => d * d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub count: f64,
    pub ot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { count: 1.0, ot: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub count_loss: f64,
    pub ot_loss: f64,
    pub total: f64,
    pub iterations: usize,
    pub marginal_violation: f64,
    pub converged: bool,
}

/// `weights.count * count_loss(sum pred, sum gt) + weights.ot * ot_loss`.
pub fn total_loss(
    pred: &DensityMap,
    gt: &DensityMap,
    cfg: &SinkhornConfig,
    weights: LossWeights,
    mode: CountLoss,
) -> Result<LossReport> {
    let cl = count_loss(pred.count(), gt.count(), mode);
    let ot = ot_loss(pred, gt, cfg)?;
    Ok(LossReport {
        count_loss: cl,
        ot_loss: ot.value,
        total: weights.count * cl + weights.ot * ot.value,
        iterations: ot.iterations,
        marginal_violation: ot.marginal_violation,
        converged: ot.converged,
    })
}

/// Dataset-level count errors. `mse` is the root of the mean squared error,
/// following crowd-counting convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub n: usize,
}

pub fn eval_metrics(pred_counts: &[f64], gt_counts: &[f64]) -> Result<MetricsReport> {
    if pred_counts.is_empty() || pred_counts.len() != gt_counts.len() {
        return Err(Error::Validation(format!(
            "need equal non-empty count lists, got {} predictions and {} targets",
            pred_counts.len(),
            gt_counts.len()
        )));
    }
    if pred_counts.iter().chain(gt_counts).any(|v| !v.is_finite()) {
        return Err(Error::Validation("counts must be finite".into()));
    }
    let n = pred_counts.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, g) in pred_counts.iter().zip(gt_counts) {
        abs += (p - g).abs();
        sq += (p - g) * (p - g);
    }
    let mae = abs / n;
    // Guard the last-ulp case where rounding would put rmse below mae.
    let mse = (sq / n).sqrt().max(mae);
    Ok(MetricsReport {
        mae,
        mse,
        n: pred_counts.len(),
    })
}
