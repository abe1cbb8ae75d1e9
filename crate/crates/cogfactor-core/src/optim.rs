//! Adam optimizer and the dataset-cycling mini-batch training loop.
//!
//! Training alternates over studies: each iteration takes a mini-batch
//! from one study (round robin, same batch size for every study),
//! samples a fresh dropout mask, and applies a bias-corrected Adam step
//! to the shared embedding and the scheduled study's head only. Per-study
//! index streams are shuffled permutations that reshuffle independently
//! when exhausted, so every pass over a study touches each sample once;
//! studies smaller than one batch are sampled with replacement.

use alloc::format;
use alloc::vec::Vec;
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::StudyDataset;
use crate::error::{Error, Result};
use crate::math;
use crate::model::{
    loss_and_grad, plain_loss_and_grad, sample_mask, FactoredGrads, FactoredModel, PlainModel,
};

/// Adam hyperparameters. The paper fixes none, so the cited method's
/// usual defaults apply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

/// First/second moment accumulators for one parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: alloc::vec![0.0; len], v: alloc::vec![0.0; len], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update on a flat parameter block.
pub fn adam_step(
    state: &mut AdamState,
    hp: &AdamParams,
    params: &mut [f64],
    grads: &[f64],
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", state.m.len()),
            got: format!("{} params, {} grads", params.len(), grads.len()),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - libm::pow(hp.beta1, t);
    let bias2 = 1.0 - libm::pow(hp.beta2, t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] -= hp.learning_rate * m_hat / (math::sqrt(v_hat) + hp.epsilon);
    }
    Ok(())
}

/// Adam slots for a [`FactoredModel`]: one block for the embedding and
/// one pair per head. A head's step count only advances on iterations
/// where its study is scheduled.
#[derive(Debug, Clone)]
pub struct FactoredAdam {
    pub hyper: AdamParams,
    embedding: AdamState,
    heads: Vec<(AdamState, AdamState)>,
}

impl FactoredAdam {
    pub fn new(model: &FactoredModel, hyper: AdamParams) -> Self {
        let embedding = AdamState::new(model.embedding.len());
        let heads = model
            .heads
            .iter()
            .map(|h| (AdamState::new(h.weights.len()), AdamState::new(h.bias.len())))
            .collect();
        Self { hyper, embedding, heads }
    }

    pub fn apply(&mut self, model: &mut FactoredModel, grads: &FactoredGrads) -> Result<()> {
        let hyper = self.hyper;
        adam_step(
            &mut self.embedding,
            &hyper,
            model.embedding.as_slice_mut().expect("contiguous embedding"),
            grads.embedding.as_slice().expect("contiguous gradient"),
        )?;
        let head = model
            .heads
            .get_mut(grads.study)
            .ok_or(Error::UnknownStudy { study: grads.study, n_studies: self.heads.len() })?;
        let (w_state, b_state) = &mut self.heads[grads.study];
        adam_step(
            w_state,
            &hyper,
            head.weights.as_slice_mut().expect("contiguous head"),
            grads.head_weights.as_slice().expect("contiguous gradient"),
        )?;
        adam_step(
            b_state,
            &hyper,
            head.bias.as_slice_mut().expect("contiguous bias"),
            grads.head_bias.as_slice().expect("contiguous gradient"),
        )?;
        Ok(())
    }
}

/// Training loop configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Latent dropout rate for factored training.
    pub dropout_rate: f64,
    /// ℓ2 strength passed through to the loss; the factored model trains
    /// with 0 (dropout is its regularizer), baselines set their own.
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_iterations: 3000,
            learning_rate: 1e-3,
            seed: 0,
            dropout_rate: 0.75,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidRate(self.dropout_rate));
        }
        if self.l2 < 0.0 {
            return Err(Error::InvalidConfig(format!("negative l2 {}", self.l2)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams::with_learning_rate(self.learning_rate)
    }
}

#[derive(Debug)]
struct StudyStream {
    order: Vec<usize>,
    cursor: usize,
}

/// Emits fixed-size batches of sample indices, cycling through studies
/// in registration order.
#[derive(Debug)]
pub struct CyclicScheduler {
    batch_size: usize,
    streams: Vec<StudyStream>,
    next_study: usize,
}

impl CyclicScheduler {
    pub fn new<R: Rng + ?Sized>(
        study_sizes: &[usize],
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if study_sizes.is_empty() {
            return Err(Error::InvalidConfig("at least one study required".into()));
        }
        let mut streams = Vec::with_capacity(study_sizes.len());
        for (study, &n) in study_sizes.iter().enumerate() {
            if n == 0 {
                return Err(Error::EmptyStudy { study });
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            streams.push(StudyStream { order, cursor: 0 });
        }
        Ok(Self { batch_size, streams, next_study: 0 })
    }

    pub fn n_studies(&self) -> usize {
        self.streams.len()
    }

    /// Next `(study, indices)` batch. Indices always come from a single
    /// study and the batch always has exactly `batch_size` entries.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (usize, Vec<usize>) {
        let study = self.next_study;
        self.next_study = (self.next_study + 1) % self.streams.len();
        let stream = &mut self.streams[study];
        let n = stream.order.len();
        let mut batch = Vec::with_capacity(self.batch_size);
        if n < self.batch_size {
            // Too small for one batch: sample with replacement.
            for _ in 0..self.batch_size {
                batch.push(stream.order[rng.random_range(0..n)]);
            }
            return (study, batch);
        }
        while batch.len() < self.batch_size {
            if stream.cursor == n {
                stream.order.shuffle(rng);
                stream.cursor = 0;
            }
            let take = (n - stream.cursor).min(self.batch_size - batch.len());
            batch.extend_from_slice(&stream.order[stream.cursor..stream.cursor + take]);
            stream.cursor += take;
        }
        (study, batch)
    }
}

/// One record of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Head index of the scheduled study.
    pub study: usize,
    pub loss: f64,
}

fn head_index(model: &FactoredModel, name: &str) -> Result<usize> {
    model
        .heads
        .iter()
        .position(|h| h.name == name)
        .ok_or_else(|| Error::InvalidConfig(format!("no head named {name}")))
}

/// Trains the factored model on the given studies.
///
/// Datasets are matched to heads by name and may be a subset of the
/// model's heads; heads without a dataset are never scheduled and keep
/// their initial parameters exactly. Every iteration draws a fresh
/// dropout mask and updates the embedding plus the scheduled head.
pub fn train<R: Rng + ?Sized>(
    model: &mut FactoredModel,
    datasets: &[&StudyDataset],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TraceEntry>> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::InvalidConfig("at least one dataset required".into()));
    }
    let mut head_of_dataset = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let head = head_index(model, &ds.name)?;
        if ds.dim() != model.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features", model.input_dim()),
                got: format!("{} in dataset {}", ds.dim(), ds.name),
            });
        }
        if ds.n_conditions() != model.heads[head].n_conditions() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} conditions", model.heads[head].n_conditions()),
                got: format!("{} in dataset {}", ds.n_conditions(), ds.name),
            });
        }
        head_of_dataset.push(head);
    }

    let sizes: Vec<usize> = datasets.iter().map(|d| d.n_samples()).collect();
    let mut scheduler = CyclicScheduler::new(&sizes, cfg.batch_size, rng)?;
    let mut optimizer = FactoredAdam::new(model, cfg.adam());
    let latent_dim = model.latent_dim();
    let mut trace = Vec::with_capacity(cfg.max_iterations);

    for iteration in 0..cfg.max_iterations {
        let (slot, indices) = scheduler.next_batch(rng);
        let study = head_of_dataset[slot];
        let ds = datasets[slot];
        let mask = sample_mask(latent_dim, cfg.dropout_rate, rng)?;
        let z = ds.x.select(Axis(0), &indices);
        let labels: Vec<usize> = indices.iter().map(|&i| ds.labels[i]).collect();
        let (loss, grads) = loss_and_grad(model, study, z.view(), &labels, &mask, cfg.l2)?;
        optimizer.apply(model, &grads)?;
        trace.push(TraceEntry { iteration, study, loss });
    }
    Ok(trace)
}

/// Mini-batch Adam training for a [`PlainModel`] on a single study. The
/// model's own penalty decides the regularization; `cfg.l2` is ignored
/// here.
pub fn train_plain<R: Rng + ?Sized>(
    model: &mut PlainModel,
    dataset: &StudyDataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<TraceEntry>> {
    cfg.validate()?;
    if dataset.dim() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} features", model.input_dim()),
            got: format!("{} in dataset {}", dataset.dim(), dataset.name),
        });
    }
    let mut scheduler = CyclicScheduler::new(&[dataset.n_samples()], cfg.batch_size, rng)?;
    let hyper = cfg.adam();
    let mut w_state = AdamState::new(model.weights.len());
    let mut b_state = AdamState::new(model.bias.len());
    let mut trace = Vec::with_capacity(cfg.max_iterations);

    for iteration in 0..cfg.max_iterations {
        let (_, indices) = scheduler.next_batch(rng);
        let x = dataset.x.select(Axis(0), &indices);
        let labels: Vec<usize> = indices.iter().map(|&i| dataset.labels[i]).collect();
        let (loss, grads) = plain_loss_and_grad(model, x.view(), &labels, rng)?;
        adam_step(
            &mut w_state,
            &hyper,
            model.weights.as_slice_mut().expect("contiguous weights"),
            grads.weights.as_slice().expect("contiguous gradient"),
        )?;
        adam_step(
            &mut b_state,
            &hyper,
            model.bias.as_slice_mut().expect("contiguous bias"),
            grads.bias.as_slice().expect("contiguous gradient"),
        )?;
        trace.push(TraceEntry { iteration, study: 0, loss });
    }
    Ok(trace)
}
