//! Evaluation metrics: MSE, accuracy, calibration and OOD scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pg_inference::Prediction;

pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::input("predictions and targets differ in length"));
    }
    if predictions.is_empty() {
        return Err(Error::input("mse of an empty set"));
    }
    let sum: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / predictions.len() as f64)
}

/// Predicted label from a latent mean; 0 counts as +1.
pub fn predicted_label(mean: f64) -> f64 {
    if mean >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Fraction of `labels` (±1) matching the sign of `means`.
pub fn accuracy(means: &[f64], labels: &[f64]) -> Result<f64> {
    if means.len() != labels.len() {
        return Err(Error::input("means and labels differ in length"));
    }
    if means.is_empty() {
        return Err(Error::input("accuracy of an empty set"));
    }
    let hits = means
        .iter()
        .zip(labels)
        .filter(|(m, y)| predicted_label(**m) == **y)
        .count();
    Ok(hits as f64 / means.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Binned confidence against empirical accuracy for binary predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDiagram {
    pub n_bins: usize,
    pub edges: Vec<f64>,
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
    pub ece: f64,
}

/// Expected calibration error over confidences `max(p, 1 − p)`, with
/// `n_bins` equal-width bins on `[0.5, 1]`. A confidence on an interior edge
/// goes to the lower bin; 0.5 belongs to the first bin.
pub fn ece(probabilities: &[f64], labels: &[f64], n_bins: usize) -> Result<ReliabilityDiagram> {
    if n_bins == 0 {
        return Err(Error::input("ece needs at least one bin"));
    }
    if probabilities.len() != labels.len() {
        return Err(Error::input("probabilities and labels differ in length"));
    }
    if let Some(p) = probabilities.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::input(format!("probability {p} outside (0, 1)")));
    }
    if labels.iter().any(|y| *y != 1.0 && *y != -1.0) {
        return Err(Error::input("labels must be ±1"));
    }
    let edges: Vec<f64> = (0..=n_bins).map(|k| 0.5 + 0.5 * k as f64 / n_bins as f64).collect();
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hit = vec![0usize; n_bins];
    for (&p, &y) in probabilities.iter().zip(labels) {
        let conf = p.max(1.0 - p);
        let b = edges[1..].iter().position(|&hi| conf <= hi).unwrap_or(n_bins - 1);
        let label = if p >= 0.5 { 1.0 } else { -1.0 };
        count[b] += 1;
        conf_sum[b] += conf;
        hit[b] += usize::from(label == y);
    }
    let total = probabilities.len();
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mc, acc) = if count[b] > 0 {
                let n = count[b] as f64;
                (Some(conf_sum[b] / n), Some(hit[b] as f64 / n))
            } else {
                (None, None)
            };
            if let (Some(c), Some(a)) = (mc, acc) {
                ece += count[b] as f64 / total as f64 * (a - c).abs();
            }
            ReliabilityBin {
                lower: edges[b],
                upper: edges[b + 1],
                count: count[b],
                mean_confidence: mc,
                accuracy: acc,
            }
        })
        .collect();
    Ok(ReliabilityDiagram {
        n_bins,
        edges,
        bins,
        total,
        ece,
    })
}

/// Out-of-distribution score: the predictive variance itself.
pub fn ood_score(prediction: &Prediction) -> f64 {
    prediction.variance
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(mse(&[2.0], &[0.0]).unwrap(), 4.0);
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.5, -2.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.3, -0.2], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(accuracy(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn ece_examples() {
        // five samples at 0.8 with four correct, five at 0.6 with three correct
        let mut p = vec![0.8; 5];
        let mut y = vec![1.0, 1.0, 1.0, 1.0, -1.0];
        p.extend([0.4; 5]);
        y.extend([-1.0, -1.0, -1.0, 1.0, 1.0]);
        assert!(ece(&p, &y, 10).unwrap().ece.abs() < 1e-12);

        let d = ece(&[0.9; 4], &[1.0; 4], 10).unwrap();
        assert!((d.ece - 0.1).abs() < 1e-12);
        assert_eq!(d.bins.iter().map(|b| b.count).sum::<usize>(), 4);

        let eps = 1e-3;
        let d = ece(&[0.5 + eps; 4], &[1.0, -1.0, 1.0, -1.0], 10).unwrap();
        assert!((d.ece - eps).abs() < 1e-12);

        assert!(ece(&[1.0], &[1.0], 10).is_err());
        assert!(ece(&[0.5], &[1.0], 0).is_err());
    }

    #[test]
    fn ece_bin_edges() {
        let d = ece(&[0.6, 0.5, 1.0 - 1e-16, 0.4], &[1.0; 4], 5).unwrap();
        assert_eq!(d.bins[0].count, 3); // 0.5, 0.6 (edge) and 0.4 -> conf 0.6
        assert_eq!(d.bins[4].count, 1);
    }

    #[test]
    fn confidently_wrong_exceeds_half() {
        let d = ece(&[0.95; 3], &[-1.0; 3], 10).unwrap();
        assert!((d.ece - 0.95).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ece_permutation_invariant_and_bounded(
            ps in proptest::collection::vec(0.001f64..0.999, 1..50),
            ys in proptest::collection::vec(any::<bool>(), 50),
            rot in 0usize..50,
        ) {
            let ys: Vec<f64> = ys[..ps.len()].iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let a = ece(&ps, &ys, 10).unwrap().ece;
            let r = rot % ps.len();
            let mut ps2 = ps.clone();
            let mut ys2 = ys.clone();
            ps2.rotate_left(r);
            ys2.rotate_left(r);
            let b = ece(&ps2, &ys2, 10).unwrap().ece;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn mse_translation(ps in proptest::collection::vec(-8i32..8, 1..20), c in -8i32..8) {
            // small integers keep every sum exact
            let p: Vec<f64> = ps.iter().map(|&v| f64::from(v)).collect();
            let t: Vec<f64> = ps.iter().rev().map(|&v| f64::from(v) * 0.5).collect();
            let shift = f64::from(c);
            let ps2: Vec<f64> = p.iter().map(|v| v + shift).collect();
            let ts2: Vec<f64> = t.iter().map(|v| v + shift).collect();
            prop_assert_eq!(mse(&p, &t).unwrap(), mse(&ps2, &ts2).unwrap());
        }

        #[test]
        fn accuracy_scale_invariant(ms in proptest::collection::vec(-5.0f64..5.0, 1..30), s in 0.01f64..100.0) {
            let ys: Vec<f64> = ms.iter().enumerate().map(|(i, _)| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
            let scaled: Vec<f64> = ms.iter().map(|m| m * s).collect();
            prop_assert_eq!(accuracy(&ms, &ys).unwrap(), accuracy(&scaled, &ys).unwrap());
        }
    }
}
