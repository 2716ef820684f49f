//! Regression and classification measures, and the evaluation report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::training::{predict_entries, Dataset, Normalizer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("{0} needs at least {1} values")]
    TooShort(&'static str, usize),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("AUC undefined: only one class present")]
    SingleClass,
    #[error("non-finite input")]
    NonFinite,
}

fn check(a: &[f64], b: &[f64], what: &'static str, min: usize) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Length {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < min {
        return Err(MetricError::TooShort(what, min));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64, MetricError> {
    check(preds, targets, "mae", 1)?;
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

/// Sample Pearson correlation, clamped to [-1, 1].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check(x, y, "pearson", 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check(x, y, "spearman", 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

pub const METAL_GAP_THRESHOLD: f64 = 0.025;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conductivity {
    Metal,
    NonMetal,
}

/// Metal iff the band gap (eV) is strictly below 0.025.
pub fn classify_metal(band_gap: f64) -> Conductivity {
    if band_gap < METAL_GAP_THRESHOLD {
        Conductivity::Metal
    } else {
        Conductivity::NonMetal
    }
}

/// Mann-Whitney AUC: the chance a random positive scores above a random
/// negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Relative improvement over a baseline error, in percent.
pub fn improvement_pct(baseline: f64, ours: f64) -> f64 {
    100.0 * (baseline - ours) / baseline
}

pub const EVAL_SCHEMA: u32 = 1;
pub const AUC_CONVENTION: &str = "positive class = non-metal (gap >= 0.025 eV), score = predicted gap";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub a: String,
    pub b: String,
    pub r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub split: String,
    pub count: usize,
    pub property_names: Vec<String>,
    /// Raw units, one per task.
    pub mae: Vec<f64>,
    pub avg_mae: f64,
    /// Spearman between prediction and target, per task; `None` if undefined.
    pub spearman: Vec<Option<f64>>,
    /// Pearson between the true targets of each task pair.
    pub target_pearson: Vec<PairCorrelation>,
    pub auc: Option<f64>,
    pub auc_convention: Option<String>,
    pub notes: Vec<String>,
    pub improvement_pct: Option<f64>,
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["split".to_string(), "count".to_string()];
        cols.extend(self.property_names.iter().map(|n| format!("mae_{n}")));
        cols.push("avg_mae".into());
        cols.extend(self.property_names.iter().map(|n| format!("spearman_{n}")));
        cols.push("auc".into());
        cols.push("improvement_pct".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut cols = vec![self.split.clone(), self.count.to_string()];
        cols.extend(self.mae.iter().map(f64::to_string));
        cols.push(self.avg_mae.to_string());
        cols.extend(self.spearman.iter().map(|&s| opt(s)));
        cols.push(opt(self.auc));
        cols.push(opt(self.improvement_pct));
        cols.join(",")
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions<'a> {
    pub split_name: String,
    /// Index of the band-gap task, enabling the metal/non-metal AUC.
    pub band_gap_task: Option<usize>,
    pub baseline: Option<&'a EvalReport>,
}

/// Metrics from already-computed raw predictions (`preds[i][p]`).
pub fn report_from_predictions(
    names: &[String],
    preds: &[Vec<f64>],
    targets: &[Vec<f64>],
    opts: &EvalOptions,
) -> Result<EvalReport, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::TooShort("evaluate", 1));
    }
    let col = |rows: &[Vec<f64>], p: usize| rows.iter().map(|r| r[p]).collect::<Vec<f64>>();
    let mut maes = Vec::new();
    let mut spear = Vec::new();
    let mut notes = Vec::new();
    for (p, name) in names.iter().enumerate() {
        let (y, t) = (col(preds, p), col(targets, p));
        maes.push(mae(&y, &t)?);
        match spearman(&y, &t) {
            Ok(r) => spear.push(Some(r)),
            Err(e) => {
                notes.push(format!("spearman {name}: {e}"));
                spear.push(None);
            }
        }
    }
    let mut target_pearson = Vec::new();
    for a in 0..names.len() {
        for b in a + 1..names.len() {
            target_pearson.push(PairCorrelation {
                a: names[a].clone(),
                b: names[b].clone(),
                r: pearson(&col(targets, a), &col(targets, b)).ok(),
            });
        }
    }
    let (mut auc, mut auc_convention) = (None, None);
    if let Some(g) = opts.band_gap_task {
        let labels: Vec<bool> = targets
            .iter()
            .map(|t| classify_metal(t[g]) == Conductivity::NonMetal)
            .collect();
        auc_convention = Some(AUC_CONVENTION.to_string());
        match roc_auc(&col(preds, g), &labels) {
            Ok(a) => auc = Some(a),
            Err(e) => notes.push(format!("auc: {e}")),
        }
    }
    let avg_mae = maes.iter().sum::<f64>() / maes.len() as f64;
    Ok(EvalReport {
        schema_version: EVAL_SCHEMA,
        split: opts.split_name.clone(),
        count: preds.len(),
        property_names: names.to_vec(),
        improvement_pct: opts.baseline.map(|b| improvement_pct(b.avg_mae, avg_mae)),
        mae: maes,
        avg_mae,
        spearman: spear,
        target_pearson,
        auc,
        auc_convention,
        notes,
    })
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Forward every listed entry, denormalize, and compute the report.
pub fn evaluate(
    dataset: &Dataset,
    indices: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
    normalizer: &Normalizer,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let preds = predict_entries(dataset, indices, params, cfg, normalizer)?;
    let targets: Vec<Vec<f64>> = indices.iter().map(|&i| dataset.entries[i].targets.clone()).collect();
    Ok(report_from_predictions(&dataset.property_names(), &preds, &targets, opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0, 3.0], &[2.0, 1.0, 4.0]).unwrap(), 1.0);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
        let norm = Normalizer {
            mean: vec![0.0],
            std: vec![2.0],
        };
        let raw = (norm.denormalize(0, 0.5) - norm.denormalize(0, 0.0)).abs();
        assert_eq!(raw, 1.0);
    }

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let twice: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let cube: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert!((pearson(&x, &twice).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[3.0; 4], &x), Err(MetricError::ZeroVariance));
        assert_eq!(spearman(&x, &cube).unwrap(), 1.0);
        assert_eq!(spearman(&x, &rev).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0; 3], &[1.0, 2.0, 3.0]), Err(MetricError::ZeroVariance));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn metal_threshold_is_strict() {
        assert_eq!(classify_metal(0.0), Conductivity::Metal);
        assert_eq!(classify_metal(0.024999999), Conductivity::Metal);
        assert_eq!(classify_metal(0.025), Conductivity::NonMetal);
        assert_eq!(classify_metal(1.1), Conductivity::NonMetal);
    }

    #[test]
    fn auc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), Err(MetricError::SingleClass));
    }

    #[test]
    fn improvement_matches_table_row() {
        let pct = improvement_pct(0.181, 0.166);
        assert_eq!((pct * 10.0).round() / 10.0, 8.3);
    }

    #[test]
    fn report_average_and_csv() {
        let names = vec!["e".to_string(), "gap".to_string()];
        let targets = vec![vec![1.0, 0.0], vec![2.0, 1.5], vec![3.0, 0.01], vec![4.0, 2.0]];
        let preds = vec![vec![1.5, 0.2], vec![2.0, 1.0], vec![2.5, 0.0], vec![4.0, 2.5]];
        let base = report_from_predictions(&names, &targets, &targets, &EvalOptions::default()).unwrap();
        let opts = EvalOptions {
            split_name: "test".into(),
            band_gap_task: Some(1),
            baseline: Some(&base),
        };
        let r = report_from_predictions(&names, &preds, &targets, &opts).unwrap();
        assert_eq!(r.avg_mae, (r.mae[0] + r.mae[1]) / 2.0);
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.csv_header().split(',').count(), r.csv_row().split(',').count());
        // a perfect baseline makes the improvement infinitely negative
        assert_eq!(r.improvement_pct, Some(f64::NEG_INFINITY));

        let one_class = vec![vec![1.0, 3.0], vec![2.0, 4.0]];
        let r = report_from_predictions(&names, &one_class, &one_class, &opts).unwrap();
        assert_eq!(r.auc, None);
        assert!(r.notes.iter().any(|n| n.contains("auc")));
    }

    fn vec_with_ties() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0i32..12).prop_map(|v| v as f64 * 0.5), 5..40)
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(x in vec_with_ties(), seed in any::<u64>()) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + ((i as u64 ^ seed) % 5) as f64).collect();
            if let Ok(base) = spearman(&x, &y) {
                let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                let cy: Vec<f64> = y.iter().map(|v| v * v * v).collect();
                prop_assert!((spearman(&ex, &cy).unwrap() - base).abs() < 1e-12);
            }
        }

        #[test]
        fn auc_invariants(scores in prop::collection::vec(-5.0f64..5.0, 4..40), bits in any::<u64>()) {
            let labels: Vec<bool> = (0..scores.len()).map(|i| bits >> (i % 64) & 1 == 1).collect();
            if let Ok(a) = roc_auc(&scores, &labels) {
                prop_assert!((0.0..=1.0).contains(&a));
                let ex: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
                prop_assert!((roc_auc(&ex, &labels).unwrap() - a).abs() < 1e-12);
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                // continuous draws are tie-free with probability one
                prop_assert!((roc_auc(&neg, &labels).unwrap() + a - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn mae_translation_invariant(p in prop::collection::vec(-10.0f64..10.0, 1..30), c in -100.0f64..100.0) {
            let t: Vec<f64> = p.iter().map(|v| v * 0.7 + 1.0).collect();
            let ps: Vec<f64> = p.iter().map(|v| v + c).collect();
            let ts: Vec<f64> = t.iter().map(|v| v + c).collect();
            prop_assert!((mae(&ps, &ts).unwrap() - mae(&p, &t).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn pearson_of_affine_map_is_sign(x in prop::collection::vec(-10.0f64..10.0, 3..30), a in -5.0f64..5.0, b in -5.0f64..5.0) {
            prop_assume!(a.abs() > 1e-3);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            if let Ok(r) = pearson(&x, &y) {
                prop_assert!((r - a.signum()).abs() < 1e-9);
            }
        }
    }
}
