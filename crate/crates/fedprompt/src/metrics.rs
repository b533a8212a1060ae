//! Evaluation metrics (accuracy, macro-F1) and the metrics CSV format.

use crate::{Error, Result};

/// Index of the row maximum; ties break toward the lowest index.
#[must_use]
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `counts[true][pred]` over paired predictions and labels.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Contract("confusion matrix needs matched non-empty slices".into()));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::Contract(format!("class out of range: pred {p}, label {l}")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean over classes of `2PR/(P+R)`, taking a class's F1 as 0
/// when precision + recall is 0 (including classes absent from both
/// predictions and labels).
#[must_use]
pub fn macro_f1(confusion: &[Vec<usize>]) -> f64 {
    let classes = confusion.len();
    let mut total = 0.0;
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let row: f64 = confusion[c].iter().sum::<usize>() as f64;
        let col: f64 = confusion.iter().map(|r| r[c]).sum::<usize>() as f64;
        let precision = if col > 0.0 { tp / col } else { 0.0 };
        let recall = if row > 0.0 { tp / row } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    total / classes as f64
}

/// Accuracy plus macro-F1 with a built-in cross-check: the direct match
/// count must equal the confusion-matrix trace.
pub fn classification_scores(preds: &[usize], labels: &[usize], classes: usize) -> Result<(f64, f64)> {
    let confusion = confusion_matrix(preds, labels, classes)?;
    let direct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
    assert_eq!(direct, trace, "accuracy recount mismatch");
    Ok((direct as f64 / preds.len() as f64, macro_f1(&confusion)))
}

/// One metrics row per federated round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub test_f1: f64,
    pub pool_size: usize,
    pub centroid_dist: f64,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "round,train_loss,test_loss,test_acc,test_f1,pool_size,centroid_dist,seconds";

impl RoundMetrics {
    #[must_use]
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            sig6(self.train_loss),
            sig6(self.test_loss),
            sig6(self.test_acc),
            sig6(self.test_f1),
            self.pool_size,
            sig6(self.centroid_dist),
            sig6(self.seconds),
        )
    }
}

/// Formats with 6 significant digits: plain decimal for exponents in
/// [-4, 5], scientific (`1.23456e8`) outside, trailing zeros trimmed.
#[must_use]
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("std float format");
    let exp: i32 = exp.parse().expect("std float exponent");
    let neg = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    debug_assert_eq!(digits.len(), 6);

    let body = if (-4..=5).contains(&exp) {
        if exp >= 0 {
            let split = (exp + 1) as usize;
            let int_part = &digits[..split];
            let frac = digits[split..].trim_end_matches('0');
            if frac.is_empty() {
                int_part.to_string()
            } else {
                format!("{int_part}.{frac}")
            }
        } else {
            let zeros = "0".repeat((-exp - 1) as usize);
            let frac = format!("{zeros}{digits}");
            let frac = frac.trim_end_matches('0');
            format!("0.{frac}")
        }
    } else {
        let head = &digits[..1];
        let tail = digits[1..].trim_end_matches('0');
        if tail.is_empty() {
            format!("{head}e{exp}")
        } else {
            format!("{head}.{tail}e{exp}")
        }
    };
    if neg {
        format!("-{body}")
    } else {
        body
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
        assert_eq!(argmax(&[2.0, 2.0, 2.0]), 0);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let (acc, f1) = classification_scores(&labels, &labels, 3).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn hand_confusion_two_classes() {
        // Confusion [[2,1],[1,2]]: accuracy 4/6, per-class F1 2/3 each.
        let labels = vec![0, 0, 0, 1, 1, 1];
        let preds = vec![0, 0, 1, 1, 1, 0];
        let (acc, f1) = classification_scores(&preds, &labels, 2).unwrap();
        assert!((acc - 4.0 / 6.0).abs() < 1e-15);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_contributes_zero_f1() {
        // Class 2 never appears in labels or predictions.
        let labels = vec![0, 1, 0, 1];
        let preds = vec![0, 1, 0, 1];
        let (acc, f1) = classification_scores(&preds, &labels, 3).unwrap();
        assert_eq!(acc, 1.0);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
        assert!(confusion_matrix(&[], &[], 3).is_err());
    }

    #[test]
    fn sig6_examples() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(-2.5), "-2.5");
        assert_eq!(sig6(1234.5678), "1234.57");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(123456789.0), "1.23457e8");
        assert_eq!(sig6(0.5), "0.5");
        assert_eq!(sig6(2.0 / 3.0), "0.666667");
        assert_eq!(sig6(1e-7), "1e-7");
        assert_eq!(sig6(999999.4), "999999");
        assert_eq!(sig6(999999.5), "1e6");
        assert_eq!(sig6(100000.0), "100000");
    }

    #[test]
    fn csv_row_shape() {
        let row = RoundMetrics {
            round: 3,
            train_loss: 2.0 / 3.0,
            test_loss: 1.25,
            test_acc: 0.5,
            test_f1: 0.25,
            pool_size: 20,
            centroid_dist: 0.0,
            seconds: 1.5,
        };
        assert_eq!(row.csv_row(), "3,0.666667,1.25,0.5,0.25,20,0,1.5");
        assert_eq!(CSV_HEADER.split(',').count(), row.csv_row().split(',').count());
    }

    proptest! {
        #[test]
        fn scores_stay_in_unit_interval(
            pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..100)
        ) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let (acc, f1) = classification_scores(&preds, &labels, 5).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert!((0.0..=1.0).contains(&f1));
        }

        #[test]
        fn sig6_roundtrips_to_six_digits(x in -1e12f64..1e12) {
            prop_assume!(x != 0.0);
            let s = sig6(x);
            let back: f64 = s.parse().unwrap();
            let rel = ((back - x) / x).abs();
            prop_assert!(rel < 1e-5, "{x} -> {s} -> {back}");
        }
    }
}
