//! Classification metrics and min-max normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Macro-averaged classification scores plus the multiclass Matthews
/// correlation coefficient. Accuracy, precision, recall and F1 live in
/// `[0, 1]`; MCC in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub mcc: f64,
}

impl Metrics {
    pub fn as_vec(&self) -> Vec<f64> {
        vec![
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.mcc,
        ]
    }
}

/// Confusion-matrix metrics over dense class ids in `[0, n_classes)`.
///
/// Macro averages run over classes that appear in the predictions or the
/// labels; classes absent from both are excluded. Precision/recall with a
/// zero denominator count as 0, and an MCC with a zero denominator is
/// defined as 0.
pub fn classification_metrics(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Metrics> {
    if preds.is_empty() || labels.is_empty() {
        return Err(Error::Data("classification_metrics: empty input".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "classification_metrics: length mismatch ({} preds vs {} labels)",
            preds.len(),
            labels.len()
        )));
    }
    if n_classes == 0 {
        return Err(Error::Data("classification_metrics: zero classes".into()));
    }
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::Data(format!(
                "classification_metrics: class id out of range (pred {p}, label {l}, C {n_classes})"
            )));
        }
    }

    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }

    let total = preds.len() as f64;
    let correct: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / total;

    let mut macro_precision = 0.0;
    let mut macro_recall = 0.0;
    let mut macro_f1 = 0.0;
    let mut present = 0usize;
    for (c, row) in confusion.iter().enumerate() {
        let tp = row[c] as f64;
        let true_count: u64 = row.iter().sum();
        let pred_count: u64 = (0..n_classes).map(|r| confusion[r][c]).sum();
        if true_count == 0 && pred_count == 0 {
            continue;
        }
        present += 1;
        let precision = if pred_count > 0 { tp / pred_count as f64 } else { 0.0 };
        let recall = if true_count > 0 { tp / true_count as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        macro_precision += precision;
        macro_recall += recall;
        macro_f1 += f1;
    }
    let present = present as f64;
    macro_precision /= present;
    macro_recall /= present;
    macro_f1 /= present;

    // Multiclass MCC from the confusion matrix: (c·s − Σ p_k t_k) normalized
    // by sqrt(s² − Σ p_k²) sqrt(s² − Σ t_k²), with a zero denominator read
    // as 0.
    let s = total;
    let c = correct as f64;
    let mut sum_pt = 0.0;
    let mut sum_pp = 0.0;
    let mut sum_tt = 0.0;
    for (k, row) in confusion.iter().enumerate() {
        let t_k: u64 = row.iter().sum();
        let p_k: u64 = (0..n_classes).map(|r| confusion[r][k]).sum();
        sum_pt += p_k as f64 * t_k as f64;
        sum_pp += (p_k as f64).powi(2);
        sum_tt += (t_k as f64).powi(2);
    }
    let denom = ((s * s - sum_pp) * (s * s - sum_tt)).sqrt();
    let mcc = if denom > 0.0 { (c * s - sum_pt) / denom } else { 0.0 };

    Ok(Metrics {
        accuracy,
        macro_precision,
        macro_recall,
        macro_f1,
        mcc,
    })
}

/// Linear map of `values` onto `[lo, hi]`: the minimum maps to `lo`, the
/// maximum to `hi`. A constant input maps every element to `hi` so a uniform
/// metric reads as full strength rather than zero.
pub fn minmax_normalize(values: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Data("minmax_normalize: empty input".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Config(format!(
            "minmax_normalize: bad target range [{lo}, {hi}]"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("minmax_normalize: non-finite input".into()));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(vec![hi; values.len()]);
    }
    Ok(values
        .iter()
        .map(|&v| {
            if v == min {
                lo
            } else if v == max {
                hi
            } else {
                let t = (v - min) / (max - min);
                (lo + t * (hi - lo)).clamp(lo, hi)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let y = vec![0, 1, 2, 3, 4, 2, 1];
        let m = classification_metrics(&y, &y, 5).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.mcc, 1.0);
    }

    #[test]
    fn constant_predictor_has_zero_mcc() {
        let preds = vec![0; 10];
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let m = classification_metrics(&preds, &labels, 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.mcc, 0.0);
    }

    // Confusion matrix [[2,1],[1,2]]: accuracy 4/6 and binary
    // MCC (2*2 - 1*1) / sqrt(3*3*3*3) = 1/3, evaluated by hand.
    #[test]
    fn hand_evaluated_binary_mcc() {
        let labels = vec![0, 0, 0, 1, 1, 1];
        let preds = vec![0, 0, 1, 0, 1, 1];
        let m = classification_metrics(&preds, &labels, 2).unwrap();
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert!((m.mcc - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_excluded_from_macro() {
        // Class 2 never appears; macro averages run over classes 0 and 1.
        let labels = vec![0, 0, 1, 1];
        let preds = vec![0, 1, 1, 1];
        let m = classification_metrics(&preds, &labels, 3).unwrap();
        let p0 = 1.0; // 1 of 1 predicted-0
        let p1 = 2.0 / 3.0;
        assert!((m.macro_precision - (p0 + p1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(classification_metrics(&[], &[], 2).is_err());
        assert!(classification_metrics(&[0, 1], &[0], 2).is_err());
        assert!(classification_metrics(&[2], &[0], 2).is_err());
    }

    #[test]
    fn minmax_linear_endpoints() {
        let out = minmax_normalize(&[0.0, 5.0, 10.0], 0.01, 1.0).unwrap();
        assert_eq!(out[0], 0.01);
        assert!((out[1] - 0.505).abs() < 1e-12);
        assert_eq!(out[2], 1.0);
    }

    #[test]
    fn minmax_constant_maps_to_hi() {
        let out = minmax_normalize(&[7.0, 7.0, 7.0], 0.01, 1.0).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn minmax_two_point() {
        let out = minmax_normalize(&[0.2, 0.8], 0.01, 1.0).unwrap();
        assert_eq!(out, vec![0.01, 1.0]);
    }

    #[test]
    fn minmax_rejects_non_finite() {
        assert!(minmax_normalize(&[1.0, f64::NAN], 0.01, 1.0).is_err());
    }
}
