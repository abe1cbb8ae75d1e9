//! Dataset containers, subject-level splitting and the synthetic
//! multi-study generator that stands in for real multi-site corpora.
//!
//! The generator draws a shared latent basis whose columns are piecewise
//! constant on block partitions of the voxel axis at configurable
//! spatial scales. Condition means are unit latent vectors, partly taken
//! from a pool shared across studies so that joint training has genuine
//! structure to transfer. Subject offsets live in the same latent space
//! (low-rank nuisance); trial noise is full-rank voxel noise.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::model::HeadSpec;
use crate::projection::Dictionary;

/// Whether sample rows are voxel images or projected loadings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Raw,
    Reduced,
}

/// One study: samples, integer condition labels and subject ids.
#[derive(Debug, Clone)]
pub struct StudyDataset {
    pub name: String,
    /// Shape `(n_samples, dim)` where `dim` is `p` (raw) or `g` (reduced).
    pub x: Array2<f64>,
    pub kind: FeatureKind,
    /// Condition labels in `[0, n_conditions)`.
    pub labels: Vec<usize>,
    /// Subject id per sample.
    pub subjects: Vec<u32>,
    pub condition_names: Vec<String>,
}

impl StudyDataset {
    pub fn new(
        name: impl Into<String>,
        x: Array2<f64>,
        kind: FeatureKind,
        labels: Vec<usize>,
        subjects: Vec<u32>,
        condition_names: Vec<String>,
    ) -> Result<Self> {
        let name = name.into();
        let n = x.nrows();
        if labels.len() != n || subjects.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} labels and subjects"),
                got: format!("{} labels, {} subjects", labels.len(), subjects.len()),
            });
        }
        let k = condition_names.len();
        if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
            return Err(Error::LabelOutOfRange { label: bad, n_classes: k });
        }
        Ok(Self { name, x, kind, labels, subjects, condition_names })
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_conditions(&self) -> usize {
        self.condition_names.len()
    }

    /// Sorted distinct subject ids.
    pub fn distinct_subjects(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.subjects.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec::new(self.name.clone(), self.condition_names.clone())
    }

    /// Same metadata with replaced features (used after projection).
    pub fn with_features(&self, x: Array2<f64>, kind: FeatureKind) -> Result<Self> {
        if x.nrows() != self.n_samples() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows", self.n_samples()),
                got: format!("{} rows", x.nrows()),
            });
        }
        Ok(Self {
            name: self.name.clone(),
            x,
            kind,
            labels: self.labels.clone(),
            subjects: self.subjects.clone(),
            condition_names: self.condition_names.clone(),
        })
    }

    fn filter_by_subjects(&self, keep: &BTreeSet<u32>) -> Self {
        let indices: Vec<usize> = self
            .subjects
            .iter()
            .enumerate()
            .filter_map(|(i, s)| keep.contains(s).then_some(i))
            .collect();
        let x = self.x.select(Axis(0), &indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let subjects = indices.iter().map(|&i| self.subjects[i]).collect();
        Self {
            name: self.name.clone(),
            x,
            kind: self.kind,
            labels,
            subjects,
            condition_names: self.condition_names.clone(),
        }
    }
}

/// A subject-level train/test partition.
#[derive(Debug, Clone)]
pub struct SubjectSplit {
    pub train_subjects: BTreeSet<u32>,
    pub test_subjects: BTreeSet<u32>,
    pub seed: u64,
}

/// Draws the subject partition for [`split_by_subject`]: the test side
/// receives `ceil(fraction * n_subjects)` subjects.
pub fn make_subject_split(ds: &StudyDataset, fraction: f64, seed: u64) -> Result<SubjectSplit> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("fraction {fraction} outside (0, 1)")));
    }
    let mut subjects = ds.distinct_subjects();
    if subjects.len() < 2 {
        return Err(Error::TooFewSubjects { available: subjects.len(), requested: 2 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let n_test = libm::ceil(fraction * subjects.len() as f64) as usize;
    if n_test >= subjects.len() {
        return Err(Error::InvalidConfig(format!(
            "fraction {fraction} leaves no training subjects among {}",
            subjects.len()
        )));
    }
    let test_subjects: BTreeSet<u32> = subjects[..n_test].iter().copied().collect();
    let train_subjects: BTreeSet<u32> = subjects[n_test..].iter().copied().collect();
    Ok(SubjectSplit { train_subjects, test_subjects, seed })
}

/// Splits a study at the subject level; no subject appears on both sides
/// and sample order is preserved within each side.
pub fn split_by_subject(
    ds: &StudyDataset,
    fraction: f64,
    seed: u64,
) -> Result<(StudyDataset, StudyDataset)> {
    let split = make_subject_split(ds, fraction, seed)?;
    let train = ds.filter_by_subjects(&split.train_subjects);
    let test = ds.filter_by_subjects(&split.test_subjects);
    Ok((train, test))
}

/// Keeps all samples of `n_subjects` uniformly chosen subjects.
pub fn subsample_subjects(ds: &StudyDataset, n_subjects: usize, seed: u64) -> Result<StudyDataset> {
    let mut subjects = ds.distinct_subjects();
    if n_subjects == 0 || n_subjects > subjects.len() {
        return Err(Error::TooFewSubjects { available: subjects.len(), requested: n_subjects });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let keep: BTreeSet<u32> = subjects[..n_subjects].iter().copied().collect();
    Ok(ds.filter_by_subjects(&keep))
}

/// Size specification of one synthetic study.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthStudySpec {
    pub conditions: usize,
    pub subjects: usize,
    pub samples_per_condition: usize,
}

/// Configuration of the synthetic multi-study generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Voxel count `p`.
    pub voxels: usize,
    /// Generative latent dimension.
    pub latent_dim: usize,
    pub studies: Vec<SynthStudySpec>,
    /// Scales the latent subject offsets; see [`generate_synthetic`].
    pub subject_noise: f64,
    /// Scales the per-voxel trial noise; see [`generate_synthetic`].
    pub trial_noise: f64,
    /// Fraction of each study's condition vectors drawn from the shared pool.
    pub shared_fraction: f64,
    /// Block counts of the spatial partitions the latent basis is built
    /// on. Later scales should be multiples of earlier ones so that the
    /// basis stays within the span of matching block dictionaries.
    pub scales: Vec<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            voxels: 2000,
            latent_dim: 20,
            studies: vec![
                SynthStudySpec { conditions: 8, subjects: 24, samples_per_condition: 2 },
                SynthStudySpec { conditions: 12, subjects: 10, samples_per_condition: 2 },
                SynthStudySpec { conditions: 16, subjects: 14, samples_per_condition: 2 },
                SynthStudySpec { conditions: 23, subjects: 32, samples_per_condition: 2 },
            ],
            subject_noise: 1.0,
            trial_noise: 0.5,
            shared_fraction: 0.7,
            scales: vec![16, 128],
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.voxels == 0 || self.latent_dim == 0 || self.studies.is_empty() {
            return Err(Error::InvalidConfig(
                "voxels, latent_dim and studies must be nonempty".into(),
            ));
        }
        if self.latent_dim > self.voxels {
            return Err(Error::InvalidConfig(format!(
                "latent_dim {} exceeds voxel count {}",
                self.latent_dim, self.voxels
            )));
        }
        for (i, s) in self.studies.iter().enumerate() {
            if s.conditions == 0 || s.subjects == 0 || s.samples_per_condition == 0 {
                return Err(Error::InvalidConfig(format!("study {i} has a zero dimension")));
            }
        }
        if self.subject_noise < 0.0 || self.trial_noise < 0.0 {
            return Err(Error::InvalidConfig("noise levels must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::InvalidConfig(format!(
                "shared_fraction {} outside [0, 1]",
                self.shared_fraction
            )));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s == 0 || s > self.voxels) {
            return Err(Error::InvalidConfig("scales must be in [1, voxels]".into()));
        }
        Ok(())
    }
}

// Internal noise conventions, chosen once so the default configuration
// produces a hard-but-learnable problem (condition means are unit latent
// vectors, roughly sqrt(2) apart).
//
// Subject offsets concentrate on a small set of "variability axes"
// shared by all studies: per-subject coefficients have sd
// `subject_noise * SUBJECT_AXIS_SD` along each of the
// `max(1, latent_dim/4)` axes, plus an isotropic background of sd
// `subject_noise * SUBJECT_BACKGROUND_SD` per coordinate. Inter-subject
// variability therefore has low-rank structure that can only be
// estimated by seeing many subjects, which is what joint multi-study
// training provides. Trial noise has per-voxel sd
// `trial_noise * TRIAL_VOXEL_SD`: sizable in voxel space (expected norm
// ~5.6 at the defaults for p = 2000) but small along any single latent
// direction.
const SUBJECT_AXIS_SD: f64 = 1.0;
const SUBJECT_BACKGROUND_SD: f64 = 0.15;
const TRIAL_VOXEL_SD: f64 = 0.25;

fn subject_axis_count(latent_dim: usize) -> usize {
    (latent_dim / 4).max(1)
}

/// Ground-truth generative quantities, returned for diagnostics.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Orthonormal spatial basis, shape `(voxels, latent_dim)`.
    pub basis: Array2<f64>,
    /// Per-study condition vectors, shape `(conditions, latent_dim)`.
    pub condition_latents: Vec<Array2<f64>>,
    /// Per-study subject offsets, shape `(subjects, latent_dim)`.
    pub subject_offsets: Vec<Array2<f64>>,
    /// Shared pool of condition vectors, shape `(pool, latent_dim)`.
    pub pool: Array2<f64>,
    /// Pool index backing each condition, `None` for private conditions.
    pub shared_assignment: Vec<Vec<Option<usize>>>,
    /// Orthonormal subject-variability axes shared by every study,
    /// shape `(n_axes, latent_dim)`.
    pub subject_axes: Array2<f64>,
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, sd: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| {
        let v: f64 = rng.sample(StandardNormal);
        v * sd
    })
}

fn unit_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Array1<f64> {
    loop {
        let v = normal_vec(rng, len, 1.0);
        let norm = math::sqrt(v.dot(&v));
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Boundaries of the `i`-th of `blocks` contiguous voxel blocks.
fn block_range(voxels: usize, blocks: usize, i: usize) -> (usize, usize) {
    (i * voxels / blocks, (i + 1) * voxels / blocks)
}

/// Draws the orthonormal latent basis: column `j` starts piecewise
/// constant on the partition `scales[j % scales.len()]`, then the columns
/// are Gram-Schmidt orthonormalized (which preserves their joint span).
fn draw_basis<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Array2<f64>> {
    let p = cfg.voxels;
    let g = cfg.latent_dim;
    let mut basis = Array2::<f64>::zeros((p, g));
    for j in 0..g {
        let blocks = cfg.scales[j % cfg.scales.len()];
        let mut column = basis.column_mut(j);
        for b in 0..blocks {
            let value: f64 = rng.sample(StandardNormal);
            let (start, end) = block_range(p, blocks, b);
            for i in start..end {
                column[i] = value;
            }
        }
    }
    // Modified Gram-Schmidt.
    for j in 0..g {
        for k in 0..j {
            let proj = basis.column(j).dot(&basis.column(k));
            let prev = basis.column(k).to_owned();
            basis.column_mut(j).scaled_add(-proj, &prev);
        }
        let norm = math::sqrt(basis.column(j).dot(&basis.column(j)));
        if norm < 1e-9 {
            return Err(Error::InvalidConfig(
                "degenerate latent basis; increase scales or voxels".into(),
            ));
        }
        basis.column_mut(j).mapv_inplace(|v| v / norm);
    }
    Ok(basis)
}

/// Generates one [`StudyDataset`] per configured study plus the
/// generative ground truth.
///
/// Condition means are `U v_c` with `v_c` a unit latent vector; for a
/// `shared_fraction` of each study's conditions `v_c` comes from a pool
/// shared across studies (sampled without replacement within a study),
/// otherwise it is a private draw. Every sample adds a per-(study,
/// subject) latent offset, drawn mostly along a few variability axes
/// common to all studies, and full-rank voxel noise. Because the
/// variability axes can only be estimated from many subject draws,
/// pooling studies genuinely improves the representations a model can
/// learn, mirroring how large cohorts inform inter-subject variability.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Vec<StudyDataset>, SynthTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = cfg.latent_dim;
    let basis = draw_basis(cfg, &mut rng)?;

    let shared_counts: Vec<usize> = cfg
        .studies
        .iter()
        .map(|s| libm::round(cfg.shared_fraction * s.conditions as f64) as usize)
        .collect();
    let pool_size = shared_counts.iter().copied().max().unwrap_or(0);
    let mut pool = Array2::<f64>::zeros((pool_size, g));
    for mut row in pool.rows_mut() {
        row.assign(&unit_vec(&mut rng, g));
    }

    // Orthonormal subject-variability axes, shared across studies.
    let n_axes = subject_axis_count(g);
    let mut subject_axes = Array2::<f64>::zeros((n_axes, g));
    for a in 0..n_axes {
        let mut axis = unit_vec(&mut rng, g);
        for prev in 0..a {
            let proj = axis.dot(&subject_axes.row(prev));
            let prev_axis = subject_axes.row(prev).to_owned();
            axis.scaled_add(-proj, &prev_axis);
        }
        let norm = math::sqrt(axis.dot(&axis));
        subject_axes.row_mut(a).assign(&(axis / norm));
    }

    let mut datasets = Vec::with_capacity(cfg.studies.len());
    let mut condition_latents = Vec::new();
    let mut subject_offsets = Vec::new();
    let mut shared_assignment = Vec::new();

    for (d, spec) in cfg.studies.iter().enumerate() {
        let k = spec.conditions;
        let n_shared = shared_counts[d].min(k).min(pool_size);

        // Which condition slots are shared, and which pool vector each uses.
        let mut slots: Vec<usize> = (0..k).collect();
        slots.shuffle(&mut rng);
        let mut pool_indices: Vec<usize> = (0..pool_size).collect();
        pool_indices.shuffle(&mut rng);
        let mut assignment: Vec<Option<usize>> = vec![None; k];
        for (slot, pool_idx) in slots.iter().take(n_shared).zip(pool_indices) {
            assignment[*slot] = Some(pool_idx);
        }

        let mut latents = Array2::<f64>::zeros((k, g));
        for (c, mut row) in latents.rows_mut().into_iter().enumerate() {
            match assignment[c] {
                Some(i) => row.assign(&pool.row(i)),
                None => row.assign(&unit_vec(&mut rng, g)),
            }
        }

        let mut offsets = Array2::<f64>::zeros((spec.subjects, g));
        let axis_sd = cfg.subject_noise * SUBJECT_AXIS_SD;
        let background_sd = cfg.subject_noise * SUBJECT_BACKGROUND_SD;
        for mut row in offsets.rows_mut() {
            row.assign(&normal_vec(&mut rng, g, background_sd));
            for axis in subject_axes.rows() {
                let coefficient: f64 = rng.sample(StandardNormal);
                row.scaled_add(coefficient * axis_sd, &axis);
            }
        }

        let n = spec.subjects * k * spec.samples_per_condition;
        let mut sample_latents = Array2::<f64>::zeros((n, g));
        let mut labels = Vec::with_capacity(n);
        let mut subjects = Vec::with_capacity(n);
        let mut row = 0;
        for subj in 0..spec.subjects {
            for cond in 0..k {
                for _ in 0..spec.samples_per_condition {
                    let mut latent = sample_latents.row_mut(row);
                    latent.assign(&latents.row(cond));
                    latent += &offsets.row(subj);
                    labels.push(cond);
                    subjects.push(subj as u32);
                    row += 1;
                }
            }
        }

        let mut x = sample_latents.dot(&basis.t());
        let trial_sd = cfg.trial_noise * TRIAL_VOXEL_SD;
        if trial_sd > 0.0 {
            for v in x.iter_mut() {
                let noise: f64 = rng.sample(StandardNormal);
                *v += noise * trial_sd;
            }
        }

        let condition_names = (0..k).map(|c| format!("cond_{c:02}")).collect();
        datasets.push(StudyDataset::new(
            format!("study_{d}"),
            x,
            FeatureKind::Raw,
            labels,
            subjects,
            condition_names,
        )?);
        condition_latents.push(latents);
        subject_offsets.push(offsets);
        shared_assignment.push(assignment);
    }

    Ok((
        datasets,
        SynthTruth {
            basis,
            condition_latents,
            subject_offsets,
            pool,
            shared_assignment,
            subject_axes,
        },
    ))
}

/// Generates a sparse nonnegative dictionary whose components are
/// contiguous voxel blocks (each voxel belongs to exactly one network),
/// with per-component amplitudes jittered by up to `jitter` around 1.
///
/// Block boundaries follow the same floor rule as the synthetic basis,
/// so a dictionary whose component count is a multiple of a basis scale
/// spans that scale's signal exactly.
pub fn block_dictionary<R: Rng + ?Sized>(
    name: impl Into<String>,
    voxels: usize,
    components: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<Dictionary> {
    if components == 0 || components > voxels {
        return Err(Error::InvalidConfig(format!(
            "component count {components} outside [1, {voxels}]"
        )));
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::InvalidConfig(format!("jitter {jitter} outside [0, 1)")));
    }
    let mut dense = Array2::<f64>::zeros((voxels, components));
    for j in 0..components {
        let amplitude = if jitter == 0.0 {
            1.0
        } else {
            rng.random_range(1.0 - jitter..1.0 + jitter)
        };
        let (start, end) = block_range(voxels, components, j);
        for i in start..end {
            dense[(i, j)] = amplitude;
        }
    }
    Dictionary::new(name, dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{compute_projection, DEFAULT_RCOND};

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            voxels: 120,
            latent_dim: 6,
            studies: vec![
                SynthStudySpec { conditions: 4, subjects: 5, samples_per_condition: 2 },
                SynthStudySpec { conditions: 3, subjects: 4, samples_per_condition: 1 },
            ],
            subject_noise: 1.0,
            trial_noise: 0.5,
            shared_fraction: 0.5,
            scales: vec![4, 12],
            seed: 7,
        }
    }

    #[test]
    fn sample_counts_follow_bookkeeping() {
        let (datasets, _) = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(datasets[0].n_samples(), 5 * 4 * 2);
        assert_eq!(datasets[1].n_samples(), 4 * 3);
        assert_eq!(datasets[0].dim(), 120);
        assert_eq!(datasets[0].distinct_subjects().len(), 5);
    }

    #[test]
    fn zero_noise_makes_condition_samples_identical() {
        let mut cfg = small_cfg();
        cfg.subject_noise = 0.0;
        cfg.trial_noise = 0.0;
        let (datasets, _) = generate_synthetic(&cfg).unwrap();
        let ds = &datasets[0];
        // All samples of condition 0 equal regardless of subject.
        let rows: Vec<usize> =
            (0..ds.n_samples()).filter(|&i| ds.labels[i] == 0).collect();
        let first = ds.x.row(rows[0]);
        for &i in &rows[1..] {
            for (a, b) in ds.x.row(i).iter().zip(first.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_fraction_zero_means_private_conditions() {
        let mut cfg = small_cfg();
        cfg.shared_fraction = 0.0;
        let (_, truth) = generate_synthetic(&cfg).unwrap();
        assert!(truth.shared_assignment.iter().flatten().all(|a| a.is_none()));
        assert_eq!(truth.pool.nrows(), 0);
    }

    #[test]
    fn shared_fraction_one_uses_pool_everywhere() {
        let mut cfg = small_cfg();
        cfg.shared_fraction = 1.0;
        let (_, truth) = generate_synthetic(&cfg).unwrap();
        assert!(truth.shared_assignment.iter().flatten().all(|a| a.is_some()));
        // Within a study, pool picks are distinct.
        for per_study in &truth.shared_assignment {
            let set: BTreeSet<usize> = per_study.iter().flatten().copied().collect();
            assert_eq!(set.len(), per_study.len());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _) = generate_synthetic(&small_cfg()).unwrap();
        let (b, _) = generate_synthetic(&small_cfg()).unwrap();
        for (da, db) in a.iter().zip(&b) {
            assert_eq!(da.x, db.x);
            assert_eq!(da.labels, db.labels);
            assert_eq!(da.subjects, db.subjects);
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        let (_, truth) = generate_synthetic(&small_cfg()).unwrap();
        let gram = truth.basis.t().dot(&truth.basis);
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn split_two_subjects_gives_one_each() {
        let (datasets, _) = generate_synthetic(&SynthConfig {
            studies: vec![SynthStudySpec {
                conditions: 2,
                subjects: 2,
                samples_per_condition: 1,
            }],
            ..small_cfg()
        })
        .unwrap();
        let (train, test) = split_by_subject(&datasets[0], 0.5, 3).unwrap();
        assert_eq!(train.distinct_subjects().len(), 1);
        assert_eq!(test.distinct_subjects().len(), 1);
        assert_ne!(train.subjects[0], test.subjects[0]);
    }

    #[test]
    fn split_uses_ceiling_rule() {
        // 79 subjects at fraction 0.5: ceil(39.5) = 40 test, 39 train.
        let (datasets, _) = generate_synthetic(&SynthConfig {
            voxels: 30,
            latent_dim: 3,
            scales: vec![3],
            studies: vec![SynthStudySpec {
                conditions: 2,
                subjects: 79,
                samples_per_condition: 1,
            }],
            ..small_cfg()
        })
        .unwrap();
        let (train, test) = split_by_subject(&datasets[0], 0.5, 0).unwrap();
        assert_eq!(test.distinct_subjects().len(), 40);
        assert_eq!(train.distinct_subjects().len(), 39);
    }

    #[test]
    fn split_is_deterministic_and_leak_free() {
        let (datasets, _) = generate_synthetic(&small_cfg()).unwrap();
        let ds = &datasets[0];
        for seed in 0..20 {
            let (train_a, test_a) = split_by_subject(ds, 0.5, seed).unwrap();
            let (train_b, _) = split_by_subject(ds, 0.5, seed).unwrap();
            assert_eq!(train_a.subjects, train_b.subjects);
            let train_set: BTreeSet<u32> = train_a.subjects.iter().copied().collect();
            let test_set: BTreeSet<u32> = test_a.subjects.iter().copied().collect();
            assert!(train_set.is_disjoint(&test_set));
            let union: BTreeSet<u32> = train_set.union(&test_set).copied().collect();
            assert_eq!(union, ds.subjects.iter().copied().collect::<BTreeSet<u32>>());
            assert_eq!(train_a.n_samples() + test_a.n_samples(), ds.n_samples());
        }
    }

    #[test]
    fn split_preserves_sample_order() {
        let (datasets, _) = generate_synthetic(&small_cfg()).unwrap();
        let ds = &datasets[0];
        let (train, _) = split_by_subject(ds, 0.5, 11).unwrap();
        // The kept samples appear in their original relative order.
        let mut cursor = 0;
        for i in 0..ds.n_samples() {
            if cursor < train.n_samples()
                && ds.subjects[i] == train.subjects[cursor]
                && ds.labels[i] == train.labels[cursor]
                && ds.x.row(i) == train.x.row(cursor)
            {
                cursor += 1;
            }
        }
        assert_eq!(cursor, train.n_samples());
    }

    #[test]
    fn split_rejects_single_subject() {
        let (datasets, _) = generate_synthetic(&SynthConfig {
            studies: vec![SynthStudySpec {
                conditions: 2,
                subjects: 1,
                samples_per_condition: 2,
            }],
            ..small_cfg()
        })
        .unwrap();
        let err = split_by_subject(&datasets[0], 0.5, 0).unwrap_err();
        assert!(matches!(err, Error::TooFewSubjects { available: 1, requested: 2 }));
    }

    #[test]
    fn subsample_identity_and_single_subject() {
        let (datasets, _) = generate_synthetic(&small_cfg()).unwrap();
        let ds = &datasets[0];
        let all = subsample_subjects(ds, 5, 1).unwrap();
        assert_eq!(all.x, ds.x);
        let one = subsample_subjects(ds, 1, 1).unwrap();
        assert_eq!(one.distinct_subjects().len(), 1);
        assert_eq!(one.n_samples(), 4 * 2);
        assert!(subsample_subjects(ds, 6, 1).is_err());
    }

    #[test]
    fn block_dictionary_is_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dict = block_dictionary("d", 100, 7, 0.3, &mut rng).unwrap();
        // Every voxel belongs to exactly one component.
        for row in dict.components().rows() {
            assert_eq!(row.iter().filter(|v| **v > 0.0).count(), 1);
        }
        // Exact left inverse through the diagonal Gram matrix.
        let w = compute_projection(&dict, DEFAULT_RCOND).unwrap();
        let product = dict.components().t().dot(&w);
        for i in 0..7 {
            for j in 0..7 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((product[(i, j)] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn trial_noise_uncorrelated_with_condition_means() {
        // Pooled z-test across 20 seeds: per-seed correlation between a
        // condition mean map and the trial-noise residual of one of its
        // samples, combined as z = sum(r_i * sqrt(p)) / sqrt(20).
        let mut pooled = 0.0;
        let n_seeds = 20;
        for seed in 0..n_seeds {
            let mut cfg = small_cfg();
            cfg.subject_noise = 0.0;
            cfg.seed = 1000 + seed;
            let (datasets, truth) = generate_synthetic(&cfg).unwrap();
            let ds = &datasets[0];
            let cond = ds.labels[0];
            let mean_map = truth.basis.dot(&truth.condition_latents[0].row(cond));
            let noise = &ds.x.row(0) - &mean_map;
            let p = mean_map.len() as f64;
            let mm = mean_map.sum() / p;
            let nm = noise.sum() / p;
            let mut cov = 0.0;
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            for (a, b) in mean_map.iter().zip(noise.iter()) {
                cov += (a - mm) * (b - nm);
                var_a += (a - mm) * (a - mm);
                var_b += (b - nm) * (b - nm);
            }
            let r = cov / math::sqrt(var_a * var_b);
            pooled += r * math::sqrt(p);
        }
        let z = pooled / math::sqrt(n_seeds as f64);
        // Two-sided critical value at p < 0.01.
        assert!(z.abs() < 2.576, "pooled z = {z}");
    }
}
