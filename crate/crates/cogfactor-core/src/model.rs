//! The factored multinomial classifier.
//!
//! Every study `d` owns a multinomial head `(W'_d, b_d)` that reads a
//! latent representation shared across studies: the embedding `W'_e`
//! maps reduced samples `z ∈ ℝ^g` to `ℝ^l`, dropout corrupts that latent
//! vector during training, and the head turns it into per-condition
//! probabilities. Baselines for the ablation grid are plain multinomial
//! models with either an ℓ2 penalty or inverted dropout on their input.
//!
//! Dropout is *inverted*: kept latent features are scaled by `1/(1-r)`
//! at training time so that inference runs without any rescaling and the
//! masked scores are unbiased estimates of the unmasked ones. All math
//! is in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::math;

/// Name and condition labels of one study's head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub name: String,
    pub condition_names: Vec<String>,
}

impl HeadSpec {
    pub fn new(name: impl Into<String>, condition_names: Vec<String>) -> Self {
        Self { name: name.into(), condition_names }
    }

    /// Spec with generated condition names `class_0 .. class_{k-1}`.
    pub fn with_dim(name: impl Into<String>, n_conditions: usize) -> Self {
        let condition_names = (0..n_conditions).map(|j| format!("class_{j}")).collect();
        Self { name: name.into(), condition_names }
    }
}

/// Study-specific multinomial head operating on the latent space.
#[derive(Debug, Clone)]
pub struct Head {
    pub name: String,
    pub condition_names: Vec<String>,
    /// Shape `(latent_dim, n_conditions)`.
    pub weights: Array2<f64>,
    /// Length `n_conditions`.
    pub bias: Array1<f64>,
}

impl Head {
    pub fn n_conditions(&self) -> usize {
        self.bias.len()
    }
}

/// Shared latent embedding plus per-study heads.
#[derive(Debug, Clone)]
pub struct FactoredModel {
    /// Shape `(input_dim, latent_dim)`.
    pub embedding: Array2<f64>,
    pub heads: Vec<Head>,
    /// Training-time dropout rate `r ∈ [0, 1)` on the latent features.
    pub dropout_rate: f64,
}

impl FactoredModel {
    /// Initializes with `W ~ U(-a, a)`, `a = sqrt(6/(fan_in+fan_out))`,
    /// and zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        latent_dim: usize,
        heads: &[HeadSpec],
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_rate(dropout_rate)?;
        if input_dim == 0 || latent_dim == 0 || heads.is_empty() {
            return Err(Error::InvalidConfig(
                "input_dim, latent_dim and heads must be nonempty".into(),
            ));
        }
        let embedding = uniform_init(input_dim, latent_dim, rng);
        let heads = heads
            .iter()
            .map(|spec| {
                let k = spec.condition_names.len();
                Head {
                    name: spec.name.clone(),
                    condition_names: spec.condition_names.clone(),
                    weights: uniform_init(latent_dim, k, rng),
                    bias: Array1::zeros(k),
                }
            })
            .collect();
        Ok(Self { embedding, heads, dropout_rate })
    }

    /// Rebuilds a model from raw parameter blocks, validating shapes and
    /// finiteness (used when loading checkpoints).
    pub fn from_parts(embedding: Array2<f64>, heads: Vec<Head>, dropout_rate: f64) -> Result<Self> {
        check_rate(dropout_rate)?;
        let latent_dim = embedding.ncols();
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("embedding has non-finite entries".into()));
        }
        for head in &heads {
            if head.weights.nrows() != latent_dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("head rows = latent dim {latent_dim}"),
                    got: format!("{} rows in head {}", head.weights.nrows(), head.name),
                });
            }
            if head.weights.ncols() != head.bias.len()
                || head.condition_names.len() != head.bias.len()
            {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} conditions in head {}", head.bias.len(), head.name),
                    got: format!(
                        "{} weight columns, {} names",
                        head.weights.ncols(),
                        head.condition_names.len()
                    ),
                });
            }
            if head.weights.iter().any(|v| !v.is_finite())
                || head.bias.iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidConfig(format!(
                    "head {} has non-finite entries",
                    head.name
                )));
            }
        }
        Ok(Self { embedding, heads, dropout_rate })
    }

    /// Reduced input dimension `g`.
    pub fn input_dim(&self) -> usize {
        self.embedding.nrows()
    }

    /// Latent dimension `l`.
    pub fn latent_dim(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn n_studies(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, study: usize) -> Result<&Head> {
        self.heads
            .get(study)
            .ok_or(Error::UnknownStudy { study, n_studies: self.heads.len() })
    }
}

fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = math::sqrt(6.0 / (rows + cols) as f64);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    Ok(())
}

/// Binary latent mask with its inverted-dropout scale `1/(1-r)`.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    keep: Array1<f64>,
    scale: f64,
}

impl DropoutMask {
    /// Entries are exactly 0.0 or 1.0.
    pub fn keep(&self) -> ArrayView1<'_, f64> {
        self.keep.view()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// All-keep mask with unit scale; equals the no-mask path bit for bit.
    pub fn identity(len: usize) -> Self {
        Self { keep: Array1::ones(len), scale: 1.0 }
    }
}

/// Samples a dropout mask: each latent feature is kept independently
/// with probability `1 - rate`.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<DropoutMask> {
    check_rate(rate)?;
    let keep_prob = 1.0 - rate;
    let keep = Array1::from_shape_fn(len, |_| {
        if rng.random::<f64>() < keep_prob {
            1.0
        } else {
            0.0
        }
    });
    Ok(DropoutMask { keep, scale: 1.0 / keep_prob })
}

/// Max-shifted softmax of one score vector.
pub fn softmax_probs(scores: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = scores.mapv(|s| math::exp(s - max));
    let sum = out.sum();
    out /= sum;
    out
}

fn softmax_rows_inplace(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|s| math::exp(s - max));
        let sum = row.sum();
        row.mapv_inplace(|p| p / sum);
    }
}

fn check_forward_shapes(
    model: &FactoredModel,
    study: usize,
    z: ArrayView2<'_, f64>,
    mask: Option<&DropoutMask>,
) -> Result<()> {
    model.head(study)?;
    if z.ncols() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} columns", model.input_dim()),
            got: format!("{} columns", z.ncols()),
        });
    }
    if let Some(mask) = mask {
        if mask.len() != model.latent_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("mask of length {}", model.latent_dim()),
                got: format!("length {}", mask.len()),
            });
        }
    }
    Ok(())
}

fn masked_latent(
    model: &FactoredModel,
    z: ArrayView2<'_, f64>,
    mask: Option<&DropoutMask>,
) -> Array2<f64> {
    let mut latent = z.dot(&model.embedding);
    if let Some(mask) = mask {
        for mut row in latent.rows_mut() {
            for (value, keep) in row.iter_mut().zip(mask.keep.iter()) {
                *value *= keep * mask.scale;
            }
        }
    }
    latent
}

/// Pre-softmax scores for one study: `(mask ⊙ scale ⊙ (W'_eᵀ z)) W'_d + b_d`.
/// Without a mask the latent features pass through unscaled (inference).
pub fn scores(
    model: &FactoredModel,
    study: usize,
    z: ArrayView2<'_, f64>,
    mask: Option<&DropoutMask>,
) -> Result<Array2<f64>> {
    check_forward_shapes(model, study, z, mask)?;
    let head = &model.heads[study];
    let latent = masked_latent(model, z, mask);
    let mut scores = latent.dot(&head.weights);
    scores += &head.bias;
    Ok(scores)
}

/// Per-condition probabilities for one study, row per sample.
pub fn forward(
    model: &FactoredModel,
    study: usize,
    z: ArrayView2<'_, f64>,
    mask: Option<&DropoutMask>,
) -> Result<Array2<f64>> {
    let mut s = scores(model, study, z, mask)?;
    softmax_rows_inplace(&mut s);
    Ok(s)
}

/// Mean negative log-probability of the true labels.
pub fn cross_entropy(probs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", probs.nrows()),
            got: format!("{}", labels.len()),
        });
    }
    let k = probs.ncols();
    let mut total = 0.0;
    for (row, &label) in probs.rows().into_iter().zip(labels) {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, n_classes: k });
        }
        total -= math::ln(row[label]);
    }
    Ok(total / labels.len().max(1) as f64)
}

/// Gradients of the single-mask batch loss with respect to the shared
/// embedding and the scheduled study's head. Heads of other studies do
/// not enter the loss, so their gradients are identically zero and are
/// not materialized.
#[derive(Debug, Clone)]
pub struct FactoredGrads {
    pub study: usize,
    pub embedding: Array2<f64>,
    pub head_weights: Array2<f64>,
    pub head_bias: Array1<f64>,
}

/// Batch loss and its exact analytic gradients for one study under a
/// fixed dropout mask.
///
/// The loss is the mean cross-entropy over the batch plus
/// `l2/2 · (‖W'_e‖² + ‖W'_d‖²)`; biases are not penalized. The mean over
/// the batch keeps gradient magnitudes independent of the batch size.
pub fn loss_and_grad(
    model: &FactoredModel,
    study: usize,
    z: ArrayView2<'_, f64>,
    labels: &[usize],
    mask: &DropoutMask,
    l2: f64,
) -> Result<(f64, FactoredGrads)> {
    check_forward_shapes(model, study, z, Some(mask))?;
    let head = &model.heads[study];
    let n = z.nrows();
    if n == 0 || labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels for a nonempty batch"),
            got: format!("{}", labels.len()),
        });
    }
    let latent = masked_latent(model, z, Some(mask));
    let mut scores = latent.dot(&head.weights);
    scores += &head.bias;

    // Log-sum-exp form of the mean cross-entropy; delta becomes the
    // exact gradient of that scalar with respect to the scores.
    let k = head.n_conditions();
    let mut loss = 0.0;
    let mut delta = scores;
    for (mut row, &label) in delta.rows_mut().into_iter().zip(labels) {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, n_classes: k });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&s| math::exp(s - max)).sum();
        let lse = max + math::ln(sum);
        loss += lse - row[label];
        for (j, value) in row.iter_mut().enumerate() {
            let p = math::exp(*value - lse);
            *value = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;

    let head_bias = delta.sum_axis(Axis(0));
    let mut head_weights = latent.t().dot(&delta);
    let mut dlatent = delta.dot(&head.weights.t());
    for mut row in dlatent.rows_mut() {
        for (value, keep) in row.iter_mut().zip(mask.keep.iter()) {
            *value *= keep * mask.scale;
        }
    }
    let mut embedding = z.t().dot(&dlatent);

    if l2 != 0.0 {
        loss += 0.5
            * l2
            * (model.embedding.iter().map(|w| w * w).sum::<f64>()
                + head.weights.iter().map(|w| w * w).sum::<f64>());
        embedding.scaled_add(l2, &model.embedding);
        head_weights.scaled_add(l2, &head.weights);
    }

    Ok((loss, FactoredGrads { study, embedding, head_weights, head_bias }))
}

/// Regularization used by a [`PlainModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// ℓ2 penalty of the given strength on the weights.
    L2(f64),
    /// Inverted dropout of the given rate on the input features.
    InputDropout(f64),
}

/// Single-study multinomial baseline operating directly on its input.
#[derive(Debug, Clone)]
pub struct PlainModel {
    /// Shape `(input_dim, n_classes)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub penalty: Penalty,
}

impl PlainModel {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        n_classes: usize,
        penalty: Penalty,
        rng: &mut R,
    ) -> Result<Self> {
        match penalty {
            Penalty::L2(lambda) if lambda < 0.0 => {
                return Err(Error::InvalidConfig(format!("negative l2 strength {lambda}")))
            }
            Penalty::InputDropout(rate) => check_rate(rate)?,
            _ => {}
        }
        Ok(Self {
            weights: uniform_init(input_dim, n_classes, rng),
            bias: Array1::zeros(n_classes),
            penalty,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    /// Inference scores `x W + b` (no dropout at test time).
    pub fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", self.input_dim()),
                got: format!("{} columns", x.ncols()),
            });
        }
        let mut scores = x.dot(&self.weights);
        scores += &self.bias;
        Ok(scores)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut s = self.scores(x)?;
        softmax_rows_inplace(&mut s);
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct PlainGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Batch loss and exact gradients for a [`PlainModel`].
///
/// The ℓ2 variant adds `λ/2 ‖W‖²` (bias unpenalized). The input-dropout
/// variant corrupts every entry of the batch independently with an
/// inverted-dropout mask drawn from `rng` before scoring; the returned
/// gradients are exact for that drawn mask.
pub fn plain_loss_and_grad<R: Rng + ?Sized>(
    model: &PlainModel,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    rng: &mut R,
) -> Result<(f64, PlainGrads)> {
    let n = x.nrows();
    if x.ncols() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} columns", model.input_dim()),
            got: format!("{} columns", x.ncols()),
        });
    }
    if n == 0 || labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels for a nonempty batch"),
            got: format!("{}", labels.len()),
        });
    }

    let corrupted = match model.penalty {
        Penalty::InputDropout(rate) if rate > 0.0 => {
            check_rate(rate)?;
            let keep_prob = 1.0 - rate;
            let scale = 1.0 / keep_prob;
            let mut xc = x.to_owned();
            xc.mapv_inplace(|v| {
                if rng.random::<f64>() < keep_prob {
                    v * scale
                } else {
                    0.0
                }
            });
            Some(xc)
        }
        _ => None,
    };
    let inputs = corrupted.as_ref().map(|m| m.view()).unwrap_or(x);

    let mut delta = inputs.dot(&model.weights);
    delta += &model.bias;
    let k = model.n_classes();
    let mut loss = 0.0;
    for (mut row, &label) in delta.rows_mut().into_iter().zip(labels) {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, n_classes: k });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&s| math::exp(s - max)).sum();
        let lse = max + math::ln(sum);
        loss += lse - row[label];
        for (j, value) in row.iter_mut().enumerate() {
            let p = math::exp(*value - lse);
            *value = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;

    let bias = delta.sum_axis(Axis(0));
    let mut weights = inputs.t().dot(&delta);
    if let Penalty::L2(lambda) = model.penalty {
        if lambda != 0.0 {
            loss += 0.5 * lambda * model.weights.iter().map(|w| w * w).sum::<f64>();
            weights.scaled_add(lambda, &model.weights);
        }
    }
    Ok((loss, PlainGrads { weights, bias }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(rng: &mut ChaCha8Rng) -> FactoredModel {
        let heads = vec![HeadSpec::with_dim("alpha", 3), HeadSpec::with_dim("beta", 4)];
        FactoredModel::init(6, 4, &heads, 0.5, rng).unwrap()
    }

    #[test]
    fn softmax_uniform_scores() {
        let p = softmax_probs(array![2.0, 2.0, 2.0].view());
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln3_case() {
        // e^{ln 3} = 3, so probabilities are [3/4, 1/4].
        let p = softmax_probs(array![crate::math::ln(3.0), 0.0].view());
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let s = array![0.3, -1.2, 4.0, 0.0];
        let shifted = s.mapv(|v| v + 123.456);
        let a = softmax_probs(s.view());
        let b = softmax_probs(shifted.view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = Array1::from_shape_fn(5, |_| rng.random_range(-30.0..30.0));
            let p = softmax_probs(s.view());
            assert!((p.sum() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let probs = Array2::from_elem((3, 4), 0.25);
        let ce = cross_entropy(probs.view(), &[0, 1, 3]).unwrap();
        assert!((ce - crate::math::ln(4.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_is_zero() {
        let probs = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(cross_entropy(probs.view(), &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_two_sample_case() {
        let probs = array![[0.75, 0.25], [0.5, 0.5]];
        let expected = -(crate::math::ln(0.75) + crate::math::ln(0.5)) / 2.0;
        let ce = cross_entropy(probs.view(), &[0, 1]).unwrap();
        assert!((ce - expected).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let probs = Array2::from_elem((1, 2), 0.5);
        let err = cross_entropy(probs.view(), &[2]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, n_classes: 2 }));
    }

    #[test]
    fn mask_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = sample_mask(10, 0.0, &mut rng).unwrap();
        assert!(mask.keep().iter().all(|v| *v == 1.0));
        assert_eq!(mask.scale(), 1.0);
    }

    #[test]
    fn mask_keep_fraction_near_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = sample_mask(100_000, 0.75, &mut rng).unwrap();
        let kept = mask.keep().iter().filter(|v| **v == 1.0).count() as f64;
        let fraction = kept / 100_000.0;
        assert!((fraction - 0.25).abs() < 0.01, "keep fraction {fraction}");
    }

    #[test]
    fn mask_rejects_bad_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_mask(4, 1.0, &mut rng), Err(Error::InvalidRate(_))));
        assert!(matches!(sample_mask(4, -0.1, &mut rng), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn forward_rate_zero_mask_equals_no_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = toy_model(&mut rng);
        let z = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
        let mask = sample_mask(4, 0.0, &mut rng).unwrap();
        let with = forward(&model, 0, z.view(), Some(&mask)).unwrap();
        let without = forward(&model, 0, z.view(), None).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn zero_embedding_gives_bias_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = toy_model(&mut rng);
        model.embedding.fill(0.0);
        model.heads[1].bias = array![0.0, 1.0, -1.0, 0.5];
        let z = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
        let probs = forward(&model, 1, z.view(), None).unwrap();
        let expected = softmax_probs(model.heads[1].bias.view());
        for row in probs.rows() {
            for (a, b) in row.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_matches_triple_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = toy_model(&mut rng);
        let z = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let mask = sample_mask(4, 0.5, &mut rng).unwrap();
        let probs = forward(&model, 0, z.view(), Some(&mask)).unwrap();

        // Naive per-sample oracle: explicit loops plus scalar softmax.
        for (i, row) in probs.rows().into_iter().enumerate() {
            let mut latent = [0.0; 4];
            for (j, slot) in latent.iter_mut().enumerate() {
                let mut sum = 0.0;
                for v in 0..6 {
                    sum += z[(i, v)] * model.embedding[(v, j)];
                }
                *slot = sum * mask.keep()[j] * mask.scale();
            }
            let head = &model.heads[0];
            let mut scores = [0.0; 3];
            for (c, slot) in scores.iter_mut().enumerate() {
                let mut sum = head.bias[c];
                for (j, lat) in latent.iter().enumerate() {
                    sum += lat * head.weights[(j, c)];
                }
                *slot = sum;
            }
            let expected = softmax_probs(ArrayView1::from(&scores[..]));
            for (a, b) in row.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_study_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = toy_model(&mut rng);
        let z = Array2::<f64>::zeros((1, 6));
        let err = forward(&model, 2, z.view(), None).unwrap_err();
        assert!(matches!(err, Error::UnknownStudy { study: 2, n_studies: 2 }));
    }

    #[test]
    fn bias_gradient_at_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = toy_model(&mut rng);
        model.embedding.fill(0.0);
        model.heads[0].weights.fill(0.0);
        model.heads[0].bias = array![0.2, -0.1, 0.4];
        let z = Array2::from_shape_fn((1, 6), |_| rng.random_range(-1.0..1.0));
        let mask = DropoutMask::identity(4);
        let (_, grads) = loss_and_grad(&model, 0, z.view(), &[2], &mask, 0.0).unwrap();
        let expected = softmax_probs(model.heads[0].bias.view()) - array![0.0, 0.0, 1.0];
        for (a, b) in grads.head_bias.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn finite_difference_check(l2: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = toy_model(&mut rng);
        let z = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
        let labels = [0usize, 2, 1, 0, 2];
        let mask = sample_mask(4, 0.5, &mut rng).unwrap();
        let (_, grads) = loss_and_grad(&model, 0, z.view(), &labels, &mask, l2).unwrap();
        let h = 1e-6;

        let check =
            |analytic: f64, model: &mut FactoredModel, set: &mut dyn FnMut(&mut FactoredModel, f64)| {
                let mut eval = |model: &mut FactoredModel, delta: f64| {
                    set(model, delta);
                    let (loss, _) = loss_and_grad(model, 0, z.view(), &labels, &mask, l2).unwrap();
                    set(model, -delta);
                    loss
                };
                let numeric = (eval(model, h) - eval(model, -h)) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-5,
                    "grad mismatch: analytic {analytic}, numeric {numeric}"
                );
            };

        for r in 0..6 {
            for c in 0..4 {
                let analytic = grads.embedding[(r, c)];
                check(analytic, &mut model, &mut |m, d| m.embedding[(r, c)] += d);
            }
        }
        for r in 0..4 {
            for c in 0..3 {
                let analytic = grads.head_weights[(r, c)];
                check(analytic, &mut model, &mut |m, d| m.heads[0].weights[(r, c)] += d);
            }
        }
        for c in 0..3 {
            let analytic = grads.head_bias[c];
            check(analytic, &mut model, &mut |m, d| m.heads[0].bias[c] += d);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(0.0, 11);
        finite_difference_check(0.3, 12);
    }

    #[test]
    fn duplicated_rows_leave_gradient_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = toy_model(&mut rng);
        let z = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
        let labels = [1usize, 0, 2];
        let mask = sample_mask(4, 0.25, &mut rng).unwrap();
        let (loss_single, grads_single) =
            loss_and_grad(&model, 0, z.view(), &labels, &mask, 0.0).unwrap();

        let doubled = ndarray::concatenate(Axis(0), &[z.view(), z.view()]).unwrap();
        let labels2 = [1usize, 0, 2, 1, 0, 2];
        let (loss_double, grads_double) =
            loss_and_grad(&model, 0, doubled.view(), &labels2, &mask, 0.0).unwrap();
        assert!((loss_single - loss_double).abs() < 1e-12);
        assert!(
            math::relative_frobenius_error(
                grads_double.embedding.view(),
                grads_single.embedding.view()
            ) < 1e-12
        );
    }

    #[test]
    fn study_isolation_under_head_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = toy_model(&mut rng);
        let mut perturbed = model.clone();
        perturbed.heads[1].weights.fill(99.0);
        perturbed.heads[1].bias.fill(-5.0);
        let z = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
        let a = forward(&model, 0, z.view(), None).unwrap();
        let b = forward(&perturbed, 0, z.view(), None).unwrap();
        assert_eq!(a, b);
        let mask = DropoutMask::identity(4);
        let (la, _) = loss_and_grad(&model, 0, z.view(), &[0, 1, 2, 0], &mask, 0.0).unwrap();
        let (lb, _) = loss_and_grad(&perturbed, 0, z.view(), &[0, 1, 2, 0], &mask, 0.0).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn dropout_scores_unbiased_over_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let heads = vec![HeadSpec::with_dim("s", 4)];
        let model = FactoredModel::init(10, 40, &heads, 0.5, &mut rng).unwrap();
        let z = Array2::from_shape_fn((3, 10), |_| rng.random_range(-1.0..1.0));
        let reference = scores(&model, 0, z.view(), None).unwrap();
        let mut mean = Array2::<f64>::zeros(reference.dim());
        let n_masks = 10_000;
        for _ in 0..n_masks {
            let mask = sample_mask(40, 0.5, &mut rng).unwrap();
            mean += &scores(&model, 0, z.view(), Some(&mask)).unwrap();
        }
        mean /= n_masks as f64;
        let rel = math::relative_frobenius_error(mean.view(), reference.view());
        assert!(rel < 0.02, "relative deviation {rel}");
    }

    #[test]
    fn deterministic_masks_and_grads() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let model = toy_model(&mut rng);
            let z = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
            let mask = sample_mask(4, 0.75, &mut rng).unwrap();
            let (loss, grads) =
                loss_and_grad(&model, 1, z.view(), &[0, 1, 2, 3], &mask, 0.1).unwrap();
            (mask.keep().to_owned(), loss, grads.embedding)
        };
        let (mask_a, loss_a, grad_a) = run();
        let (mask_b, loss_b, grad_b) = run();
        assert_eq!(mask_a, mask_b);
        assert_eq!(loss_a.to_bits(), loss_b.to_bits());
        assert_eq!(grad_a, grad_b);
    }

    #[test]
    fn plain_matches_factored_with_identity_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let plain = PlainModel::init(5, 3, Penalty::L2(0.0), &mut rng).unwrap();
        let mut factored =
            FactoredModel::init(5, 5, &[HeadSpec::with_dim("s", 3)], 0.0, &mut rng).unwrap();
        factored.embedding = Array2::eye(5);
        factored.heads[0].weights = plain.weights.clone();
        factored.heads[0].bias = plain.bias.clone();
        let x = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let labels = [0usize, 1, 2, 0, 1, 2];
        let (loss_p, grads_p) = plain_loss_and_grad(&plain, x.view(), &labels, &mut rng).unwrap();
        let mask = DropoutMask::identity(5);
        let (loss_f, grads_f) = loss_and_grad(&factored, 0, x.view(), &labels, &mask, 0.0).unwrap();
        assert!((loss_p - loss_f).abs() < 1e-12);
        assert!(
            math::relative_frobenius_error(grads_p.weights.view(), grads_f.head_weights.view())
                < 1e-12
        );
    }

    #[test]
    fn plain_finite_difference() {
        for penalty in [Penalty::L2(0.05), Penalty::InputDropout(0.4)] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut model = PlainModel::init(4, 3, penalty, &mut rng).unwrap();
            let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
            let labels = [0usize, 1, 2, 1, 0];
            // Clone the generator so every evaluation draws the same mask.
            let base_rng = rng.clone();
            let (_, grads) =
                plain_loss_and_grad(&model, x.view(), &labels, &mut base_rng.clone()).unwrap();
            let h = 1e-6;
            for r in 0..4 {
                for c in 0..3 {
                    let eval = |m: &mut PlainModel, d: f64| {
                        m.weights[(r, c)] += d;
                        let (loss, _) =
                            plain_loss_and_grad(m, x.view(), &labels, &mut base_rng.clone())
                                .unwrap();
                        m.weights[(r, c)] -= d;
                        loss
                    };
                    let numeric = (eval(&mut model, h) - eval(&mut model, -h)) / (2.0 * h);
                    let analytic = grads.weights[(r, c)];
                    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                    assert!(
                        (analytic - numeric).abs() / denom < 1e-5,
                        "penalty {penalty:?}: analytic {analytic}, numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_rate_dropout_equals_unpenalized_l2() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model_a = PlainModel::init(4, 3, Penalty::InputDropout(0.0), &mut rng).unwrap();
        let mut model_b = model_a.clone();
        model_b.penalty = Penalty::L2(0.0);
        let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let labels = [0usize, 1, 2, 1, 0];
        let (loss_a, grads_a) =
            plain_loss_and_grad(&model_a, x.view(), &labels, &mut rng.clone()).unwrap();
        let (loss_b, grads_b) =
            plain_loss_and_grad(&model_b, x.view(), &labels, &mut rng.clone()).unwrap();
        assert_eq!(loss_a.to_bits(), loss_b.to_bits());
        assert_eq!(grads_a.weights, grads_b.weights);
    }
}
