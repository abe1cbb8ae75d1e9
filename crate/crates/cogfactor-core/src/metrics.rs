//! Prediction accuracy helpers.

use alloc::format;
use alloc::vec::Vec;
use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::model::{FactoredModel, PlainModel};

/// Argmax predictions, ties broken by the lowest class index.
pub fn predict_labels(scores: ArrayView2<'_, f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_value = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_value {
                    best = j;
                    best_value = v;
                }
            }
            best
        })
        .collect()
}

/// Fraction of argmax predictions equal to the labels. Scores and
/// probabilities give the same result since softmax is monotone.
pub fn accuracy_from_scores(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    if scores.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", scores.nrows()),
            got: format!("{}", labels.len()),
        });
    }
    if labels.is_empty() {
        return Err(Error::TooFewSamples { available: 0, requested: 1 });
    }
    let predictions = predict_labels(scores);
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Held-out accuracy of a factored model on one study (inference mode,
/// no dropout).
pub fn accuracy_factored(
    model: &FactoredModel,
    study: usize,
    z: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<f64> {
    let scores = crate::model::scores(model, study, z, None)?;
    accuracy_from_scores(scores.view(), labels)
}

/// Held-out accuracy of a plain baseline.
pub fn accuracy_plain(
    model: &PlainModel,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<f64> {
    let scores = model.scores(x)?;
    accuracy_from_scores(scores.view(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_score_one() {
        let scores = array![[2.0, 0.0], [0.0, 2.0], [3.0, 1.0]];
        assert_eq!(accuracy_from_scores(scores.view(), &[0, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn permuted_labels_complement_accuracy() {
        let scores = array![[2.0, 0.0], [0.0, 2.0], [3.0, 1.0], [1.0, 3.0]];
        let acc = accuracy_from_scores(scores.view(), &[0, 1, 0, 1]).unwrap();
        let flipped = accuracy_from_scores(scores.view(), &[1, 0, 1, 0]).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(flipped, 1.0 - acc);
    }

    #[test]
    fn random_scores_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let scores = Array2::from_shape_fn((n, 4), |_| rng.random_range(0.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let acc = accuracy_from_scores(scores.view(), &labels).unwrap();
        assert!((acc - 0.25).abs() < 0.02, "accuracy {acc}");
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let scores = array![[1.0, 1.0, 1.0]];
        assert_eq!(predict_labels(scores.view()), alloc::vec![0]);
    }

    #[test]
    fn label_count_mismatch_rejected() {
        let scores = array![[1.0, 0.0]];
        assert!(matches!(
            accuracy_from_scores(scores.view(), &[0, 1]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
