//! Fold aggregation, pairwise inter-model similarity and median-fold
//! selection.
//!
//! Aggregation order is fixed: (1) per fold and class, mean over
//! patients with a present entry; (2) per class, mean and population
//! std over the fold values; (3) the Avg column averages the per-fold
//! cross-class means, then takes mean and std across folds.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{dice, MetricEntry, MetricsTable};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassAggregate {
    pub class: String,
    pub dice: Option<MeanStd>,
    pub hd95_mm: Option<MeanStd>,
}

/// Cells excluded because a fold had no present entries for a class.
#[derive(Clone, Debug, Serialize)]
pub struct ExcludedCell {
    pub fold: usize,
    pub class: String,
    pub metric: String,
}

/// Table-shaped aggregate for one model: one column block per class
/// plus the cross-class Avg block.
#[derive(Clone, Debug, Serialize)]
pub struct AggregateReport {
    pub model: String,
    pub classes: Vec<ClassAggregate>,
    pub avg_dice: Option<MeanStd>,
    pub avg_hd95_mm: Option<MeanStd>,
    pub excluded: Vec<ExcludedCell>,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

fn metric_of(e: &MetricEntry, which: &str) -> Option<f64> {
    match which {
        "dice" => e.dice,
        _ => e.hd95_mm,
    }
}

/// Aggregate one model's entries. `class_order` fixes the report rows;
/// fold indices present in the table define the fold set.
pub fn aggregate(table: &MetricsTable, model: &str, class_order: &[String]) -> AggregateReport {
    let entries: Vec<&MetricEntry> = table
        .entries
        .iter()
        .filter(|e| e.model == model)
        .collect();
    let mut folds: Vec<usize> = entries.iter().map(|e| e.fold).collect();
    folds.sort_unstable();
    folds.dedup();

    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    let mut per_fold_cross_class: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for metric in ["dice", "hd95_mm"] {
        per_fold_cross_class.insert(metric, vec![Vec::new(); folds.len()]);
    }

    let mut class_stats: BTreeMap<(String, &str), Vec<f64>> = BTreeMap::new();
    for class in class_order {
        for metric in ["dice", "hd95_mm"] {
            for (fi, &fold) in folds.iter().enumerate() {
                let vals: Vec<f64> = entries
                    .iter()
                    .filter(|e| e.fold == fold && &e.class_name == class)
                    .filter_map(|e| metric_of(e, metric))
                    .collect();
                if vals.is_empty() {
                    excluded.push(ExcludedCell {
                        fold,
                        class: class.clone(),
                        metric: metric.to_string(),
                    });
                    continue;
                }
                let fold_mean = vals.iter().sum::<f64>() / vals.len() as f64;
                class_stats
                    .entry((class.clone(), metric))
                    .or_default()
                    .push(fold_mean);
                per_fold_cross_class.get_mut(metric).expect("init")[fi].push(fold_mean);
            }
        }
        let make = |metric: &str| -> Option<MeanStd> {
            class_stats
                .get(&(class.clone(), metric))
                .filter(|v| !v.is_empty())
                .map(|v| mean_std(v))
        };
        classes.push(ClassAggregate {
            class: class.clone(),
            dice: make("dice"),
            hd95_mm: make("hd95_mm"),
        });
    }

    let avg_of = |metric: &str| -> Option<MeanStd> {
        let fold_means: Vec<f64> = per_fold_cross_class[metric]
            .iter()
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        (!fold_means.is_empty()).then(|| mean_std(&fold_means))
    };

    AggregateReport {
        model: model.to_string(),
        classes,
        avg_dice: avg_of("dice"),
        avg_hd95_mm: avg_of("hd95_mm"),
        excluded,
    }
}

/// One model's hard-label prediction for one patient.
#[derive(Clone, Debug)]
pub struct LabeledPred {
    pub model: String,
    pub patient: String,
    pub fold: usize,
    pub labels: Vec<u8>,
}

/// Symmetric model-by-model mean Dice (cross-class Avg, mean ± std
/// across folds), treating one model's labels as the reference for the
/// other's.
#[derive(Clone, Debug, Serialize)]
pub struct PairwiseMatrix {
    pub models: Vec<String>,
    /// cells[i][j] for i != j; diagonal is None.
    pub cells: Vec<Vec<Option<MeanStd>>>,
}

impl PairwiseMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for m in &self.models {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for (i, m) in self.models.iter().enumerate() {
            s.push_str(m);
            for j in 0..self.models.len() {
                s.push(',');
                if let Some(cell) = &self.cells[i][j] {
                    s.push_str(&format!("{:.4}+-{:.4}", cell.mean, cell.std));
                } else {
                    s.push('-');
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Pairwise Dice between model predictions, aggregated exactly like the
/// reference-based protocol.
pub fn pairwise_model_dice(
    preds: &[LabeledPred],
    class_names: &[String],
) -> Result<PairwiseMatrix> {
    let mut models: Vec<String> = preds.iter().map(|p| p.model.clone()).collect();
    models.sort();
    models.dedup();
    let by_model: BTreeMap<&str, Vec<&LabeledPred>> = models
        .iter()
        .map(|m| {
            (
                m.as_str(),
                preds.iter().filter(|p| &p.model == m).collect::<Vec<_>>(),
            )
        })
        .collect();

    // all models must cover the identical patient set
    let patient_set = |m: &str| -> Vec<(&str, usize)> {
        let mut v: Vec<(&str, usize)> = by_model[m]
            .iter()
            .map(|p| (p.patient.as_str(), p.fold))
            .collect();
        v.sort();
        v
    };
    let reference_patients = patient_set(&models[0]);
    for m in &models[1..] {
        if patient_set(m) != reference_patients {
            return Err(Error::data(format!(
                "model {m} is missing predictions for some cases"
            )));
        }
    }

    let n = models.len();
    let mut cells: Vec<Vec<Option<MeanStd>>> = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut table = MetricsTable::default();
            let preds_i: BTreeMap<&str, &LabeledPred> = by_model[models[i].as_str()]
                .iter()
                .map(|p| (p.patient.as_str(), *p))
                .collect();
            for pj in &by_model[models[j].as_str()] {
                let pi = preds_i[pj.patient.as_str()];
                if pi.labels.len() != pj.labels.len() {
                    return Err(Error::data(format!(
                        "misaligned predictions for {}",
                        pj.patient
                    )));
                }
                for (ci, class) in class_names.iter().enumerate() {
                    let d = dice(&pi.labels, &pj.labels, (ci + 1) as u8)?;
                    table.push(MetricEntry {
                        model: "pair".into(),
                        fold: pj.fold,
                        patient: pj.patient.clone(),
                        class_name: class.clone(),
                        dice: d,
                        hd95_mm: None,
                    });
                }
            }
            let report = aggregate(&table, "pair", class_names);
            cells[i][j] = report.avg_dice.clone();
            cells[j][i] = report.avg_dice;
        }
    }
    Ok(PairwiseMatrix { models, cells })
}

/// Average the per-model fold scores across models, then pick the fold
/// holding the lower-median value (ties toward the smaller index).
pub fn median_fold_select(per_model_per_fold: &[Vec<f64>]) -> usize {
    assert!(!per_model_per_fold.is_empty());
    let k = per_model_per_fold[0].len();
    assert!(k >= 1);
    let fold_means: Vec<f64> = (0..k)
        .map(|f| {
            per_model_per_fold.iter().map(|m| m[f]).sum::<f64>() / per_model_per_fold.len() as f64
        })
        .collect();
    let mut sorted = fold_means.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let target = sorted[(k - 1) / 2];
    fold_means
        .iter()
        .position(|&v| v == target)
        .expect("median value present")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_hand_arithmetic() {
        // 2 patients x 2 classes x 1 fold
        let mut t = MetricsTable::default();
        let rows = [
            ("p1", "c1", 0.8),
            ("p1", "c2", 0.6),
            ("p2", "c1", 1.0),
            ("p2", "c2", 0.4),
        ];
        for (p, c, d) in rows {
            t.push(MetricEntry {
                model: "m".into(),
                fold: 0,
                patient: p.into(),
                class_name: c.into(),
                dice: Some(d),
                hd95_mm: None,
            });
        }
        let rep = aggregate(&t, "m", &["c1".into(), "c2".into()]);
        assert!((rep.classes[0].dice.as_ref().unwrap().mean - 0.9).abs() < 1e-12);
        assert!((rep.classes[1].dice.as_ref().unwrap().mean - 0.5).abs() < 1e-12);
        assert!((rep.avg_dice.as_ref().unwrap().mean - 0.7).abs() < 1e-12);
    }

    #[test]
    fn aggregate_constant_entries() {
        let mut t = MetricsTable::default();
        for fold in 0..3 {
            for p in 0..2 {
                t.push(MetricEntry {
                    model: "m".into(),
                    fold,
                    patient: format!("p{p}"),
                    class_name: "c".into(),
                    dice: Some(0.77),
                    hd95_mm: Some(3.5),
                });
            }
        }
        let rep = aggregate(&t, "m", &["c".into()]);
        let d = rep.classes[0].dice.as_ref().unwrap();
        assert_eq!(d.mean, 0.77);
        assert_eq!(d.std, 0.0);
        assert_eq!(rep.avg_hd95_mm.as_ref().unwrap().mean, 3.5);
    }

    #[test]
    fn aggregate_order_invariant() {
        let mut rows = vec![
            ("p1", 0usize, 0.8),
            ("p2", 0, 0.7),
            ("p3", 1, 0.9),
            ("p4", 1, 0.5),
        ];
        let build = |rows: &[(&str, usize, f64)]| {
            let mut t = MetricsTable::default();
            for (p, f, d) in rows {
                t.push(MetricEntry {
                    model: "m".into(),
                    fold: *f,
                    patient: (*p).into(),
                    class_name: "c".into(),
                    dice: Some(*d),
                    hd95_mm: None,
                });
            }
            aggregate(&t, "m", &["c".into()])
        };
        let a = build(&rows);
        rows.reverse();
        let b = build(&rows);
        assert_eq!(
            a.avg_dice.as_ref().unwrap().mean,
            b.avg_dice.as_ref().unwrap().mean
        );
    }

    #[test]
    fn aggregate_flags_empty_fold_class_cells() {
        let mut t = MetricsTable::default();
        t.push(MetricEntry {
            model: "m".into(),
            fold: 0,
            patient: "p".into(),
            class_name: "c".into(),
            dice: None,
            hd95_mm: None,
        });
        let rep = aggregate(&t, "m", &["c".into()]);
        assert!(rep.avg_dice.is_none());
        assert_eq!(rep.excluded.len(), 2);
    }

    #[test]
    fn pairwise_self_and_symmetry() {
        let mk = |model: &str, labels: Vec<u8>| LabeledPred {
            model: model.into(),
            patient: "p1".into(),
            fold: 0,
            labels,
        };
        let preds = vec![
            mk("a", vec![0, 1, 1, 2]),
            mk("b", vec![0, 1, 2, 2]),
        ];
        let classes = vec!["c1".to_string(), "c2".to_string()];
        let m = pairwise_model_dice(&preds, &classes).unwrap();
        let ab = m.cells[0][1].as_ref().unwrap().mean;
        let ba = m.cells[1][0].as_ref().unwrap().mean;
        assert_eq!(ab, ba);
        assert!(m.cells[0][0].is_none());

        // a model against itself scores 1 for every present class
        let self_preds = vec![mk("a", vec![0, 1, 1, 2]), mk("b", vec![0, 1, 1, 2])];
        let m = pairwise_model_dice(&self_preds, &classes).unwrap();
        assert_eq!(m.cells[0][1].as_ref().unwrap().mean, 1.0);
    }

    #[test]
    fn pairwise_missing_case_is_error() {
        let preds = vec![
            LabeledPred {
                model: "a".into(),
                patient: "p1".into(),
                fold: 0,
                labels: vec![0, 1],
            },
            LabeledPred {
                model: "b".into(),
                patient: "p2".into(),
                fold: 0,
                labels: vec![0, 1],
            },
        ];
        assert!(pairwise_model_dice(&preds, &["c".to_string()]).is_err());
    }

    #[test]
    fn median_fold_examples() {
        let scores = vec![vec![0.70, 0.80, 0.75, 0.72, 0.78]];
        assert_eq!(median_fold_select(&scores), 2);
        assert_eq!(median_fold_select(&[vec![0.5]]), 0);
        assert_eq!(median_fold_select(&[vec![0.5, 0.5, 0.5]]), 0);
    }
}
