//! Classification metrics, explanation scoring, and the ablation harness.

mod ablation;
mod explanation;

pub use ablation::{ablation_run, run_variant, AblationRow, AblationTable, VariantSummary, HSIC_EPOCHS};
pub use explanation::{
    explanation_score, explanation_score_on, mean_score, ranked_edges, write_explanations, ExplanationScore, EXPLANATION_K, MU_GRID,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Dataset;
use crate::model::{evaluate_split, ModelParams};

/// Binary confusion counts with class 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
}

impl Confusion {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn from_predictions(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Scoring(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => return Err(Error::Scoring(format!("non-binary label pair ({p}, {t})"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// F1 is 0 when there are no positives at all; MCC is 0 whenever a
    /// marginal of its denominator is empty.
    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Scoring("empty confusion".into()));
        }
        let [tp, tn, fp, fn_] = [self.tp, self.tn, self.fp, self.fn_].map(|v| v as f64);
        let f1_den = 2.0 * tp + fp + fn_;
        let mcc_den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        Ok(Metrics {
            accuracy: (tp + tn) / total as f64,
            f1: if f1_den == 0.0 { 0.0 } else { 2.0 * tp / f1_den },
            mcc: if mcc_den == 0.0 {
                0.0
            } else {
                (tp * tn - fp * fn_) / mcc_den.sqrt()
            },
        })
    }
}

/// Confusion of `params` on the graphs at `idx`.
pub fn evaluate(params: &ModelParams, ds: &Dataset, idx: &[usize]) -> Result<Confusion> {
    if ds.n_classes != 2 {
        return Err(Error::Scoring(format!(
            "binary metrics need 2 classes, dataset has {}",
            ds.n_classes
        )));
    }
    let (pred, truth) = evaluate_split(params, ds, idx)?;
    Confusion::from_predictions(&pred, &truth)
}
