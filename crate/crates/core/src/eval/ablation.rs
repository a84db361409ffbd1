use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, Metrics};
use crate::error::{Error, Result};
use crate::graph::Dataset;
use crate::model::{train, History, TrainConfig, TrainOutcome, Variant};

/// Epochs at which the α–β dependence is reported.
pub const HSIC_EPOCHS: [usize; 3] = [1, 50, 100];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: Metrics,
    /// HSIC(α, β) at each of [`HSIC_EPOCHS`]; absent for variants without a
    /// latent space or runs shorter than the epoch.
    pub hsic: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub accuracy_mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub accuracy_std: f64,
    pub f1_mean: f64,
    pub mcc_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn hsic_at(history: &History, epoch: usize) -> Option<f64> {
    history.iter().find(|r| r.epoch == epoch).and_then(|r| r.hsic_alpha_beta)
}

/// Trains every variant once per seed. Within a seed all variants see the
/// same split and initialization stream; only the objective differs.
pub fn ablation_run(ds: &Dataset, variants: &[Variant], base: &TrainConfig, seeds: &[u64]) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        for &variant in variants {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            rows.push(run_variant(ds, &cfg)?.0);
        }
    }
    Ok(AblationTable { rows })
}

/// One training run scored on its test split; the outcome is returned for
/// callers that need the trained parameters.
pub fn run_variant(ds: &Dataset, cfg: &TrainConfig) -> Result<(AblationRow, TrainOutcome)> {
    let out = train(ds, cfg)?;
    let test = evaluate(&out.params, ds, &out.split.test)?.metrics()?;
    let row = AblationRow {
        variant: cfg.variant,
        seed: cfg.seed,
        best_epoch: out.best_epoch,
        test,
        hsic: HSIC_EPOCHS.iter().map(|&e| hsic_at(&out.history, e)).collect(),
    };
    Ok((row, out))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl AblationTable {
    /// Per-variant aggregates in first-appearance order.
    pub fn summary(&self) -> Vec<VariantSummary> {
        let mut order: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.variant) {
                order.push(r.variant);
            }
        }
        order
            .into_iter()
            .map(|variant| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == variant).collect();
                let col = |f: fn(&Metrics) -> f64| rows.iter().map(|r| f(&r.test)).collect::<Vec<_>>();
                let (accuracy_mean, accuracy_std) = mean_std(&col(|m| m.accuracy));
                VariantSummary {
                    variant,
                    runs: rows.len(),
                    accuracy_mean,
                    accuracy_std,
                    f1_mean: mean_std(&col(|m| m.f1)).0,
                    mcc_mean: mean_std(&col(|m| m.mcc)).0,
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Report<'a> {
            hsic_epochs: [usize; 3],
            rows: &'a [AblationRow],
            summary: Vec<VariantSummary>,
        }
        serde_json::to_string_pretty(&Report {
            hsic_epochs: HSIC_EPOCHS,
            rows: &self.rows,
            summary: self.summary(),
        })
        .map_err(|e| Error::Scoring(format!("report serialization: {e}")))
    }

    /// Fixed-width table, one line per run.
    pub fn to_table(&self) -> String {
        let mut header = vec![
            "variant".to_string(),
            "seed".into(),
            "best".into(),
            "accuracy".into(),
            "f1".into(),
            "mcc".into(),
        ];
        header.extend(HSIC_EPOCHS.iter().map(|e| format!("hsic@{e}")));
        let mut lines = vec![header];
        for r in &self.rows {
            let mut line = vec![
                r.variant.to_string(),
                r.seed.to_string(),
                r.best_epoch.to_string(),
                format!("{:.4}", r.test.accuracy),
                format!("{:.4}", r.test.f1),
                format!("{:.4}", r.test.mcc),
            ];
            line.extend(r.hsic.iter().map(|h| cell(*h)));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_ba2motif;
    use crate::model::{evaluate_split, train};

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            gc_epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_variant_matches_direct_training() {
        let ds = generate_ba2motif(40, 2).unwrap();
        let cfg = TrainConfig { seed: 5, ..tiny() };
        let table = ablation_run(&ds, &[Variant::Full], &cfg, &[5]).unwrap();
        assert_eq!(table.rows.len(), 1);
        let direct = train(&ds, &cfg).unwrap();
        let (pred, truth) = evaluate_split(&direct.params, &ds, &direct.split.test).unwrap();
        let m = super::super::Confusion::from_predictions(&pred, &truth).unwrap().metrics().unwrap();
        let row = &table.rows[0];
        assert_eq!(row.test, m);
        assert_eq!(row.best_epoch, direct.best_epoch);
        assert_eq!(row.hsic[0], direct.history[0].hsic_alpha_beta);
        assert!(row.hsic[0].is_some());
        assert_eq!(&row.hsic[1..], &[None, None]);
    }

    #[test]
    fn summary_and_rendering() {
        let m = |a| Metrics {
            accuracy: a,
            f1: a,
            mcc: 0.0,
        };
        let row = |variant, seed, a| AblationRow {
            variant,
            seed,
            best_epoch: 9,
            test: m(a),
            hsic: vec![Some(0.04), None, Some(0.03)],
        };
        let table = AblationTable {
            rows: vec![
                row(Variant::Full, 0, 1.0),
                row(Variant::NoCausal, 0, 0.5),
                row(Variant::Full, 1, 0.8),
            ],
        };
        let s = table.summary();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].variant, Variant::Full);
        assert_eq!(s[0].runs, 2);
        assert!((s[0].accuracy_mean - 0.9).abs() < 1e-12);
        assert!((s[0].accuracy_std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1].accuracy_std, 0.0);

        let text = table.to_table();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("variant"));
        assert!(lines[2].starts_with("no-causal"));
        assert!(lines[1].contains("0.0400") && lines[1].contains(" - "));
        // Right-aligned numeric columns end at the same offset.
        assert_eq!(lines[1].len(), lines[3].len());

        let v: serde_json::Value = serde_json::from_str(&table.to_json().unwrap()).unwrap();
        assert_eq!(v["rows"].as_array().unwrap().len(), 3);
        assert_eq!(v["summary"][1]["variant"], "no-causal");
        assert_eq!(v["hsic_epochs"][2], 100);
    }

    #[test]
    fn rejects_empty_inputs() {
        let ds = generate_ba2motif(20, 0).unwrap();
        assert!(matches!(ablation_run(&ds, &[], &tiny(), &[0]), Err(Error::Config(_))));
        assert!(matches!(ablation_run(&ds, &[Variant::Full], &tiny(), &[]), Err(Error::Config(_))));
        assert!(matches!("bogus".parse::<Variant>(), Err(Error::Config(_))));
    }
}
