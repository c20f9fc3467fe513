//! Regression (sMAPE, MASE, WAPE) and binary classification (accuracy, F1,
//! AUC) metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{AmnError, Result};

fn check_pair(y: &[f64], yhat: &[f64], what: &str) -> Result<()> {
    if y.is_empty() {
        return Err(AmnError::Contract(format!("{what} of an empty series")));
    }
    if y.len() != yhat.len() {
        return Err(AmnError::Contract(format!(
            "{what}: {} targets vs {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

/// Mean of `2|ŷ − y| / (|y| + |ŷ|)`; terms with a zero denominator count 0.
pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, "smape")?;
    let total: f64 = y
        .iter()
        .zip(yhat)
        .map(|(&a, &b)| {
            let den = a.abs() + b.abs();
            if den == 0.0 {
                0.0
            } else {
                2.0 * (b - a).abs() / den
            }
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// In-sample one-step naive MAE; `None` for fewer than two values.
pub fn naive_mae(y_train: &[f64]) -> Option<f64> {
    (y_train.len() >= 2).then(|| {
        y_train.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (y_train.len() - 1) as f64
    })
}

/// Mean absolute error scaled by the in-sample one-step naive error of
/// `y_train`.
pub fn mase(y: &[f64], yhat: &[f64], y_train: &[f64]) -> Result<f64> {
    let naive = naive_mae(y_train).ok_or_else(|| {
        AmnError::UndefinedMetric("mase needs at least two training targets".into())
    })?;
    mase_scaled(y, yhat, naive)
}

/// MASE with a precomputed naive error.
pub fn mase_scaled(y: &[f64], yhat: &[f64], naive: f64) -> Result<f64> {
    check_pair(y, yhat, "mase")?;
    if naive == 0.0 {
        return Err(AmnError::UndefinedMetric(
            "mase: training series is constant (zero naive error)".into(),
        ));
    }
    let mae = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
    Ok(mae / naive)
}

/// `Σ|y − ŷ| / Σ|y|`.
pub fn wape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, "wape")?;
    let den: f64 = y.iter().map(|v| v.abs()).sum();
    if den == 0.0 {
        return Err(AmnError::UndefinedMetric("wape: all targets are zero".into()));
    }
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / den)
}

fn check_labels(y: &[f64], p: &[f64], what: &str) -> Result<()> {
    check_pair(y, p, what)?;
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(AmnError::Contract(format!("{what}: labels must be 0 or 1")));
    }
    Ok(())
}

/// Fraction of samples where `p >= threshold` agrees with the label.
pub fn accuracy(y: &[f64], p: &[f64], threshold: f64) -> Result<f64> {
    check_labels(y, p, "accuracy")?;
    let correct = y
        .iter()
        .zip(p)
        .filter(|(&yt, &pt)| (pt >= threshold) == (yt == 1.0))
        .count();
    Ok(correct as f64 / y.len() as f64)
}

/// F1 on the positive class, 0 when precision or recall is undefined.
pub fn f1(y: &[f64], p: &[f64], threshold: f64) -> Result<f64> {
    check_labels(y, p, "f1")?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&yt, &pt) in y.iter().zip(p) {
        match (pt >= threshold, yt == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Mann–Whitney AUC with half credit for ties.
pub fn auc(y: &[f64], p: &[f64]) -> Result<f64> {
    check_labels(y, p, "auc")?;
    let pos = y.iter().filter(|&&v| v == 1.0).count();
    let neg = y.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(AmnError::UndefinedMetric("auc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    // Walk tie groups in ascending score order; every positive beats the
    // negatives seen so far and ties with those in its own group.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && p[order[j]] == p[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| y[k] == 1.0).count();
        let group_neg = (j - i) - group_pos;
        wins += (group_pos * neg_below) as f64 + 0.5 * (group_pos * group_neg) as f64;
        neg_below += group_neg;
        i = j;
    }
    Ok(wins / (pos * neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
    pub n_samples: usize,
}

impl MetricReport {
    /// `y_train` scales MASE; all values in original units.
    pub fn regression(y: &[f64], yhat: &[f64], y_train: &[f64]) -> Result<Self> {
        let naive = naive_mae(y_train).ok_or_else(|| {
            AmnError::UndefinedMetric("mase needs at least two training targets".into())
        })?;
        Self::regression_scaled(y, yhat, naive)
    }

    /// As [`MetricReport::regression`] with the MASE denominator given.
    pub fn regression_scaled(y: &[f64], yhat: &[f64], naive: f64) -> Result<Self> {
        let metrics = BTreeMap::from([
            ("smape".to_string(), smape(y, yhat)?),
            ("mase".to_string(), mase_scaled(y, yhat, naive)?),
            ("wape".to_string(), wape(y, yhat)?),
        ]);
        Ok(MetricReport {
            task: Task::Regression,
            metrics,
            n_samples: y.len(),
        })
    }

    /// `p` are probabilities.
    pub fn classification(y: &[f64], p: &[f64]) -> Result<Self> {
        let metrics = BTreeMap::from([
            ("accuracy".to_string(), accuracy(y, p, 0.5)?),
            ("f1".to_string(), f1(y, p, 0.5)?),
            ("auc".to_string(), auc(y, p)?),
        ]);
        Ok(MetricReport {
            task: Task::Classification,
            metrics,
            n_samples: y.len(),
        })
    }

    /// Aligned two-column text table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>12}\n", "metric", "value");
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k:<10} {v:>12.6}\n"));
        }
        out.push_str(&format!("{:<10} {:>12}\n", "samples", self.n_samples));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pairwise count over every positive/negative pair.
    fn brute_auc(y: &[f64], p: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0usize;
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    pairs += 1;
                    if p[i] > p[j] {
                        wins += 1.0;
                    } else if p[i] == p[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs as f64
    }

    #[test]
    fn regression_fixtures() {
        assert_eq!(smape(&[1.0, 1.0], &[1.0, 3.0]).unwrap(), 0.5);
        assert_eq!(smape(&[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(mase(&[1.0, 2.0], &[2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(wape(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 0.5);
        assert!(matches!(wape(&[0.0, 0.0], &[1.0, 1.0]), Err(AmnError::UndefinedMetric(_))));
        assert!(matches!(mase(&[1.0], &[1.0], &[2.0, 2.0]), Err(AmnError::UndefinedMetric(_))));
        assert!(matches!(smape(&[], &[]), Err(AmnError::Contract(_))));
    }

    #[test]
    fn classification_fixtures() {
        let y = [0.0, 1.0];
        let p = [0.1, 0.9];
        assert_eq!(accuracy(&y, &p, 0.5).unwrap(), 1.0);
        assert_eq!(f1(&y, &p, 0.5).unwrap(), 1.0);
        assert_eq!(auc(&y, &p).unwrap(), 1.0);
        assert_eq!(auc(&y, &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.0, 0.0, 1.0, 1.0], &[0.1, 0.4, 0.35, 0.8]).unwrap(), 0.75);
        assert_eq!(f1(&[0.0, 0.0], &[0.1, 0.2], 0.5).unwrap(), 0.0);
        assert!(matches!(auc(&[1.0, 1.0], &[0.2, 0.3]), Err(AmnError::UndefinedMetric(_))));
    }

    #[test]
    fn mase_of_naive_forecast_on_random_walk_is_near_one() {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::seeded(11);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut walk = vec![0.0];
        for _ in 0..20_000 {
            let last = *walk.last().unwrap();
            walk.push(last + n.sample(&mut rng));
        }
        let (train, test) = walk.split_at(10_000);
        let naive: Vec<f64> = std::iter::once(*train.last().unwrap())
            .chain(test[..test.len() - 1].iter().copied())
            .collect();
        let m = mase(test, &naive, train).unwrap();
        assert!((m - 1.0).abs() < 0.05, "{m}");
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(
            data in proptest::collection::vec((0u8..2, 0u8..8), 2..100)
        ) {
            let y: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let p: Vec<f64> = data.iter().map(|d| d.1 as f64 / 7.0).collect();
            prop_assume!(y.contains(&0.0) && y.contains(&1.0));
            prop_assert_eq!(auc(&y, &p).unwrap(), brute_auc(&y, &p));
            let q: Vec<f64> = p.iter().map(|v| v.powi(3) + 2.0).collect();
            prop_assert_eq!(auc(&y, &q).unwrap(), auc(&y, &p).unwrap());
        }

        #[test]
        fn regression_ranges_and_scale(
            pairs in proptest::collection::vec((0.1f64..10.0, 0.1f64..10.0), 1..50),
            c in 0.5f64..4.0
        ) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let yh: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let s = smape(&y, &yh).unwrap();
            prop_assert!((0.0..=2.0).contains(&s));
            let w = wape(&y, &yh).unwrap();
            let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
            let yhc: Vec<f64> = yh.iter().map(|v| v * c).collect();
            prop_assert!((wape(&yc, &yhc).unwrap() - w).abs() < 1e-12);
            prop_assert_eq!(smape(&y, &y).unwrap(), 0.0);
        }
    }
}
