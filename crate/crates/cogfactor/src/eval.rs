//! The experiment harness: six-variant ablation grid, learning curves
//! over train size, and the multi-scale projection benchmark.
//!
//! Every fold draws a fresh subject split (seed = base + fold) of every
//! study; paired comparisons within a fold therefore always share the
//! same test half. All randomness flows through per-(fold, variant)
//! ChaCha streams, so reports are bit-reproducible for a given
//! configuration, fold by fold, regardless of `jobs`.
//!
//! Variant map: 1 raw + ℓ2, 2 projected + ℓ2, 3 projected +
//! input-dropout, 4 factored single-study, 5 factored target plus the
//! largest auxiliary study, 6 factored on all studies. Baseline
//! regularization strengths are picked by nested validation on the
//! training half over a fixed grid.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cogfactor_core::data::{split_by_subject, subsample_subjects, FeatureKind, StudyDataset};
use cogfactor_core::metrics::{accuracy_factored, accuracy_plain};
use cogfactor_core::model::{FactoredModel, HeadSpec, Penalty, PlainModel};
use cogfactor_core::optim::{train, train_plain, TrainConfig};
use cogfactor_core::projection::ProjectionOperator;

use crate::error::{Error, Result};
use crate::report::hash_json;

/// Settings shared by all harness entry points.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HarnessConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Latent dropout rate of the factored variants.
    pub dropout_rate: f64,
    /// Latent dimension `l` of the factored variants.
    pub latent_dim: usize,
    /// Factored training budget: total iterations are
    /// `iterations_per_study * n_participating_studies`, so every study
    /// receives the same number of updates in every variant.
    pub iterations_per_study: usize,
    /// Iteration budget of the plain baselines (variants 1-3).
    pub baseline_iterations: usize,
    /// ℓ2 grid searched by nested validation for variants 1-2.
    pub lambda_grid: Vec<f64>,
    /// Input-dropout grid searched for variant 3.
    pub dropout_grid: Vec<f64>,
    /// Nested validation splits per fold for the baseline grids.
    pub inner_folds: usize,
    /// Fraction of subjects moved to the test side of every split.
    pub split_fraction: f64,
    pub seed: u64,
    /// Target studies by name; `None` means every study except the
    /// auxiliary one (the study with the most subjects).
    pub targets: Option<Vec<String>>,
    /// Worker threads for fold-level parallelism.
    pub jobs: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            dropout_rate: 0.75,
            latent_dim: 100,
            iterations_per_study: 400,
            baseline_iterations: 150,
            lambda_grid: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0],
            dropout_grid: vec![0.25, 0.5, 0.75],
            inner_folds: 1,
            split_fraction: 0.5,
            seed: 42,
            targets: None,
            jobs: 1,
        }
    }
}

impl HarnessConfig {
    fn train_config(&self, n_studies: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_iterations: self.iterations_per_study * n_studies,
            learning_rate: self.learning_rate,
            seed,
            dropout_rate: self.dropout_rate,
            l2: 0.0,
        }
    }

    fn baseline_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_iterations: self.baseline_iterations,
            learning_rate: self.learning_rate,
            seed,
            dropout_rate: 0.0,
            l2: 0.0,
        }
    }
}

/// One fold-level accuracy measurement.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccuracyRecord {
    pub variant: u8,
    pub target_study: String,
    /// Distinct training subjects of the target study in this fold.
    pub train_subjects: usize,
    pub fold_seed: u64,
    pub test_accuracy: f64,
    /// Distinguishes paired arms (e.g. "single" vs "multiscale");
    /// empty for plain ablation and curve records.
    #[serde(default)]
    pub arm: String,
}

/// Wall-clock time of one training run. Kept apart from the accuracy
/// records so the deterministic report artifacts stay byte-identical
/// across runs.
#[derive(Debug, Clone, Serialize)]
pub struct TimingRecord {
    pub variant: u8,
    pub target_study: String,
    pub arm: String,
    pub fold_seed: u64,
    pub seconds: f64,
}

/// Accuracy records keyed by (variant, study, train size, fold).
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub records: Vec<AccuracyRecord>,
    #[serde(skip)]
    pub timings: Vec<TimingRecord>,
}

impl ExperimentReport {
    fn assemble(
        config_hash: String,
        mut records: Vec<AccuracyRecord>,
        timings: Vec<TimingRecord>,
    ) -> Self {
        // Deterministic order no matter how folds were scheduled.
        records.sort_by(|a, b| {
            (a.variant, &a.target_study, &a.arm, a.train_subjects, a.fold_seed).cmp(&(
                b.variant,
                &b.target_study,
                &b.arm,
                b.train_subjects,
                b.fold_seed,
            ))
        });
        Self { config_hash, records, timings }
    }

    /// Mean test accuracy of the matching records.
    pub fn mean_accuracy(&self, variant: u8, target: &str, arm: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.variant == variant && r.target_study == target && r.arm == arm)
            .map(|r| r.test_accuracy)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// FNV-style fold of stream tags into one ChaCha stream id.
fn rng_stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut stream: u64 = 0xcbf2_9ce4_8422_2325;
    for &tag in tags {
        stream ^= tag;
        stream = stream.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn mix(parts: &[u64]) -> u64 {
    let mut acc: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        acc ^= p;
        acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
        acc = acc.rotate_left(17);
    }
    acc
}

fn find_study(datasets: &[StudyDataset], name: &str) -> Result<usize> {
    datasets
        .iter()
        .position(|d| d.name == name)
        .ok_or_else(|| Error::Invalid(format!("no study named {name:?}")))
}

/// Index of the auxiliary study: the one with most subjects (HCP
/// stand-in), ties broken by registration order.
fn auxiliary_index(datasets: &[StudyDataset]) -> usize {
    let mut best = 0;
    let mut best_subjects = 0;
    for (i, ds) in datasets.iter().enumerate() {
        let n = ds.distinct_subjects().len();
        if n > best_subjects {
            best = i;
            best_subjects = n;
        }
    }
    best
}

fn resolve_targets(datasets: &[StudyDataset], cfg: &HarnessConfig) -> Result<Vec<usize>> {
    match &cfg.targets {
        Some(names) => names.iter().map(|n| find_study(datasets, n)).collect(),
        None => {
            if datasets.len() == 1 {
                return Ok(vec![0]);
            }
            let aux = auxiliary_index(datasets);
            Ok((0..datasets.len()).filter(|&i| i != aux).collect())
        }
    }
}

fn project_all(
    datasets: &[StudyDataset],
    op: &ProjectionOperator,
) -> Result<Vec<StudyDataset>> {
    datasets
        .iter()
        .map(|ds| {
            let z = op.project(ds.x.view())?;
            Ok(ds.with_features(z, FeatureKind::Reduced)?)
        })
        .collect()
}

/// Trains one plain baseline and returns held-out accuracy.
fn plain_run(
    penalty: Penalty,
    train_ds: &StudyDataset,
    test_ds: &StudyDataset,
    cfg: &HarnessConfig,
    seed: u64,
    tags: &[u64],
) -> Result<f64> {
    let mut rng = rng_stream(seed, tags);
    let mut model =
        PlainModel::init(train_ds.dim(), train_ds.n_conditions(), penalty, &mut rng)?;
    train_plain(&mut model, train_ds, &cfg.baseline_config(seed), &mut rng)?;
    Ok(accuracy_plain(&model, test_ds.x.view(), &test_ds.labels)?)
}

/// Nested grid selection on the training half. Falls back to the middle
/// of the grid when the training half has too few subjects to split.
fn select_penalty(
    make: impl Fn(f64) -> Penalty,
    grid: &[f64],
    train_ds: &StudyDataset,
    cfg: &HarnessConfig,
    fold_seed: u64,
    variant: u8,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Invalid("empty regularization grid".into()));
    }
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let mut means = vec![0.0; grid.len()];
    let mut usable_folds = 0;
    for inner in 0..cfg.inner_folds.max(1) {
        let inner_seed = mix(&[fold_seed, variant as u64, inner as u64, 0x1337]);
        let Ok((inner_train, inner_val)) =
            split_by_subject(train_ds, cfg.split_fraction, inner_seed)
        else {
            continue;
        };
        usable_folds += 1;
        for (i, &value) in grid.iter().enumerate() {
            let acc = plain_run(
                make(value),
                &inner_train,
                &inner_val,
                cfg,
                inner_seed,
                &[variant as u64, i as u64],
            )?;
            means[i] += acc;
        }
    }
    if usable_folds == 0 {
        return Ok(grid[grid.len() / 2]);
    }
    let mut best = 0;
    for (i, &mean) in means.iter().enumerate() {
        if mean > means[best] {
            best = i;
        }
    }
    Ok(grid[best])
}

/// Trains the factored model on the given training studies and scores
/// the target's test half. `studies[0]` must be the target.
fn factored_run(
    train_studies: &[&StudyDataset],
    test_ds: &StudyDataset,
    cfg: &HarnessConfig,
    fold_seed: u64,
    tags: &[u64],
) -> Result<f64> {
    let mut rng = rng_stream(fold_seed, tags);
    let specs: Vec<HeadSpec> = train_studies.iter().map(|d| d.head_spec()).collect();
    let input_dim = train_studies[0].dim();
    let mut model = FactoredModel::init(
        input_dim,
        cfg.latent_dim,
        &specs,
        cfg.dropout_rate,
        &mut rng,
    )?;
    let train_cfg = cfg.train_config(train_studies.len(), fold_seed);
    train(&mut model, train_studies, &train_cfg, &mut rng)?;
    Ok(accuracy_factored(&model, 0, test_ds.x.view(), &test_ds.labels)?)
}

struct FoldOutput {
    records: Vec<AccuracyRecord>,
    timings: Vec<TimingRecord>,
}

#[allow(clippy::too_many_arguments)]
fn ablation_fold(
    raw: &[StudyDataset],
    reduced: Option<&[StudyDataset]>,
    targets: &[usize],
    aux: usize,
    variants: &[u8],
    cfg: &HarnessConfig,
    fold: usize,
) -> Result<FoldOutput> {
    let fold_seed = cfg.seed + fold as u64;
    let raw_splits: Vec<_> = raw
        .iter()
        .map(|ds| split_by_subject(ds, cfg.split_fraction, fold_seed))
        .collect::<cogfactor_core::Result<_>>()?;
    let reduced_splits: Option<Vec<_>> = match reduced {
        Some(reduced) => Some(
            reduced
                .iter()
                .map(|ds| split_by_subject(ds, cfg.split_fraction, fold_seed))
                .collect::<cogfactor_core::Result<_>>()?,
        ),
        None => None,
    };

    let mut records = Vec::new();
    let mut timings = Vec::new();
    fn push(
        records: &mut Vec<AccuracyRecord>,
        timings: &mut Vec<TimingRecord>,
        variant: u8,
        target: &StudyDataset,
        subjects: usize,
        fold_seed: u64,
        acc: f64,
        secs: f64,
    ) {
        records.push(AccuracyRecord {
            variant,
            target_study: target.name.clone(),
            train_subjects: subjects,
            fold_seed,
            test_accuracy: acc,
            arm: String::new(),
        });
        timings.push(TimingRecord {
            variant,
            target_study: target.name.clone(),
            arm: String::new(),
            fold_seed,
            seconds: secs,
        });
    }

    // Variant 6 is one joint training per fold; it serves every target.
    let v6_model: Option<FactoredModel> = if variants.contains(&6) {
        let splits = reduced_splits.as_ref().expect("validated: projection present");
        let train_sets: Vec<&StudyDataset> = splits.iter().map(|(tr, _)| tr).collect();
        let mut rng = rng_stream(fold_seed, &[6]);
        let specs: Vec<HeadSpec> = train_sets.iter().map(|d| d.head_spec()).collect();
        let mut model = FactoredModel::init(
            train_sets[0].dim(),
            cfg.latent_dim,
            &specs,
            cfg.dropout_rate,
            &mut rng,
        )?;
        let train_cfg = cfg.train_config(train_sets.len(), fold_seed);
        let start = Instant::now();
        train(&mut model, &train_sets, &train_cfg, &mut rng)?;
        let secs = start.elapsed().as_secs_f64();
        // Attribute the joint training time to every target it serves.
        for &t in targets {
            timings.push(TimingRecord {
                variant: 6,
                target_study: raw[t].name.clone(),
                arm: String::new(),
                fold_seed,
                seconds: secs,
            });
        }
        Some(model)
    } else {
        None
    };

    for &target in targets {
        for &variant in variants {
            match variant {
                1 => {
                    let (train_ds, test_ds) = &raw_splits[target];
                    let start = Instant::now();
                    let lambda = select_penalty(
                        Penalty::L2,
                        &cfg.lambda_grid,
                        train_ds,
                        cfg,
                        fold_seed,
                        1,
                    )?;
                    let acc = plain_run(
                        Penalty::L2(lambda),
                        train_ds,
                        test_ds,
                        cfg,
                        fold_seed,
                        &[1, target as u64],
                    )?;
                    push(&mut records, &mut timings, 1, test_ds,
                        train_ds.distinct_subjects().len(), fold_seed, acc,
                        start.elapsed().as_secs_f64());
                }
                2 | 3 => {
                    let splits = reduced_splits.as_ref().expect("validated");
                    let (train_ds, test_ds) = &splits[target];
                    let start = Instant::now();
                    let acc = if variant == 2 {
                        let lambda = select_penalty(
                            Penalty::L2,
                            &cfg.lambda_grid,
                            train_ds,
                            cfg,
                            fold_seed,
                            2,
                        )?;
                        plain_run(
                            Penalty::L2(lambda),
                            train_ds,
                            test_ds,
                            cfg,
                            fold_seed,
                            &[2, target as u64],
                        )?
                    } else {
                        let rate = select_penalty(
                            Penalty::InputDropout,
                            &cfg.dropout_grid,
                            train_ds,
                            cfg,
                            fold_seed,
                            3,
                        )?;
                        plain_run(
                            Penalty::InputDropout(rate),
                            train_ds,
                            test_ds,
                            cfg,
                            fold_seed,
                            &[3, target as u64],
                        )?
                    };
                    push(&mut records, &mut timings, variant, test_ds,
                        train_ds.distinct_subjects().len(), fold_seed, acc,
                        start.elapsed().as_secs_f64());
                }
                4 => {
                    let splits = reduced_splits.as_ref().expect("validated");
                    let (train_ds, test_ds) = &splits[target];
                    let start = Instant::now();
                    let acc = factored_run(
                        &[train_ds],
                        test_ds,
                        cfg,
                        fold_seed,
                        &[4, target as u64],
                    )?;
                    push(&mut records, &mut timings, 4, test_ds,
                        train_ds.distinct_subjects().len(), fold_seed, acc,
                        start.elapsed().as_secs_f64());
                }
                5 => {
                    if aux == target || raw.len() < 2 {
                        return Err(Error::Core(
                            cogfactor_core::Error::MissingAuxiliary(format!(
                                "variant 5 needs an auxiliary study distinct from {}",
                                raw[target].name
                            )),
                        ));
                    }
                    let splits = reduced_splits.as_ref().expect("validated");
                    let (train_ds, test_ds) = &splits[target];
                    let (aux_train, _) = &splits[aux];
                    let start = Instant::now();
                    let acc = factored_run(
                        &[train_ds, aux_train],
                        test_ds,
                        cfg,
                        fold_seed,
                        &[5, target as u64],
                    )?;
                    push(&mut records, &mut timings, 5, test_ds,
                        train_ds.distinct_subjects().len(), fold_seed, acc,
                        start.elapsed().as_secs_f64());
                }
                6 => {
                    let model = v6_model.as_ref().expect("trained above");
                    let splits = reduced_splits.as_ref().expect("validated");
                    let (train_ds, test_ds) = &splits[target];
                    let acc =
                        accuracy_factored(model, target, test_ds.x.view(), &test_ds.labels)?;
                    records.push(AccuracyRecord {
                        variant: 6,
                        target_study: test_ds.name.clone(),
                        train_subjects: train_ds.distinct_subjects().len(),
                        fold_seed,
                        test_accuracy: acc,
                        arm: String::new(),
                    });
                }
                other => {
                    return Err(Error::Invalid(format!("unknown ablation variant {other}")))
                }
            }
        }
    }
    Ok(FoldOutput { records, timings })
}

fn run_folds<F>(folds: usize, jobs: usize, work: F) -> Result<(Vec<AccuracyRecord>, Vec<TimingRecord>)>
where
    F: Fn(usize) -> Result<FoldOutput> + Sync,
{
    let outputs: Vec<Result<FoldOutput>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| (0..folds).into_par_iter().map(&work).collect())
    } else {
        (0..folds).map(&work).collect()
    };
    let mut records = Vec::new();
    let mut timings = Vec::new();
    for output in outputs {
        let output = output?;
        records.extend(output.records);
        timings.extend(output.timings);
    }
    Ok((records, timings))
}

/// Runs the requested ablation variants over `folds` subject splits.
///
/// `datasets` hold raw (unprojected) samples; `op` is required for
/// variants 2-6. Variant 6 trains once per fold and is scored on every
/// target study.
pub fn run_ablation(
    datasets: &[StudyDataset],
    op: Option<&ProjectionOperator>,
    variants: &[u8],
    folds: usize,
    cfg: &HarnessConfig,
) -> Result<ExperimentReport> {
    if datasets.is_empty() {
        return Err(Error::Invalid("at least one dataset required".into()));
    }
    let mut variants: Vec<u8> = variants.to_vec();
    variants.sort_unstable();
    variants.dedup();
    if variants.is_empty() || variants.iter().any(|v| !(1..=6).contains(v)) {
        return Err(Error::Invalid(format!("variants must lie in 1..=6, got {variants:?}")));
    }
    if variants.iter().any(|&v| v >= 2) && op.is_none() {
        return Err(Error::Invalid("variants 2-6 need a projection operator".into()));
    }
    if variants.iter().any(|&v| v >= 5) && datasets.len() < 2 {
        return Err(Error::Core(cogfactor_core::Error::MissingAuxiliary(
            "variants 5-6 need auxiliary studies".into(),
        )));
    }
    let targets = resolve_targets(datasets, cfg)?;
    let aux = auxiliary_index(datasets);
    let reduced = op.map(|op| project_all(datasets, op)).transpose()?;

    let fingerprint = (
        "ablation",
        cfg,
        &variants,
        folds,
        datasets.iter().map(|d| (d.name.as_str(), d.n_samples(), d.dim())).collect::<Vec<_>>(),
    );
    let config_hash = hash_json(&fingerprint)?;

    let (records, timings) = run_folds(folds, cfg.jobs, |fold| {
        ablation_fold(datasets, reduced.as_deref(), &targets, aux, &variants, cfg, fold)
    })?;
    Ok(ExperimentReport::assemble(config_hash, records, timings))
}

/// Learning curves: accuracy of variants 4 and 6 as the number of
/// training subjects of the target study varies over `subject_grid`.
/// Test halves stay fixed within a fold.
pub fn learning_curve(
    datasets: &[StudyDataset],
    op: &ProjectionOperator,
    target_name: &str,
    subject_grid: &[usize],
    folds: usize,
    cfg: &HarnessConfig,
) -> Result<ExperimentReport> {
    let target = find_study(datasets, target_name)?;
    let reduced = project_all(datasets, op)?;

    let fingerprint = (
        "curves",
        cfg,
        target_name,
        subject_grid,
        folds,
        datasets.iter().map(|d| (d.name.as_str(), d.n_samples(), d.dim())).collect::<Vec<_>>(),
    );
    let config_hash = hash_json(&fingerprint)?;

    let (records, timings) = run_folds(folds, cfg.jobs, |fold| {
        let fold_seed = cfg.seed + fold as u64;
        let splits: Vec<_> = reduced
            .iter()
            .map(|ds| split_by_subject(ds, cfg.split_fraction, fold_seed))
            .collect::<cogfactor_core::Result<_>>()?;
        let (target_train, target_test) = &splits[target];

        let mut records = Vec::new();
        let mut timings = Vec::new();
        for &n_subjects in subject_grid {
            let sub_seed = mix(&[fold_seed, n_subjects as u64, 0xcafe]);
            let sub_train = subsample_subjects(target_train, n_subjects, sub_seed)?;

            let start = Instant::now();
            let acc4 = factored_run(
                &[&sub_train],
                target_test,
                cfg,
                fold_seed,
                &[4, n_subjects as u64],
            )?;
            let secs4 = start.elapsed().as_secs_f64();

            let mut train_sets: Vec<&StudyDataset> = vec![&sub_train];
            for (i, (train_ds, _)) in splits.iter().enumerate() {
                if i != target {
                    train_sets.push(train_ds);
                }
            }
            let start = Instant::now();
            let acc6 = factored_run(
                &train_sets,
                target_test,
                cfg,
                fold_seed,
                &[6, n_subjects as u64],
            )?;
            let secs6 = start.elapsed().as_secs_f64();

            for (variant, acc, secs) in [(4u8, acc4, secs4), (6u8, acc6, secs6)] {
                records.push(AccuracyRecord {
                    variant,
                    target_study: target_test.name.clone(),
                    train_subjects: n_subjects,
                    fold_seed,
                    test_accuracy: acc,
                    arm: String::new(),
                });
                timings.push(TimingRecord {
                    variant,
                    target_study: target_test.name.clone(),
                    arm: String::new(),
                    fold_seed,
                    seconds: secs,
                });
            }
        }
        Ok(FoldOutput { records, timings })
    })?;
    Ok(ExperimentReport::assemble(config_hash, records, timings))
}

/// Paired comparison of variant-6 accuracy under two projections,
/// recorded as arms "single" and "multiscale" with identical splits.
pub fn multiscale_benchmark(
    single_op: &ProjectionOperator,
    multi_op: &ProjectionOperator,
    datasets: &[StudyDataset],
    folds: usize,
    cfg: &HarnessConfig,
) -> Result<ExperimentReport> {
    if single_op.voxels() != multi_op.voxels() {
        return Err(Error::Core(cogfactor_core::Error::ShapeMismatch {
            expected: format!("{} voxels", single_op.voxels()),
            got: format!("{} voxels", multi_op.voxels()),
        }));
    }
    if datasets.len() < 2 {
        return Err(Error::Core(cogfactor_core::Error::MissingAuxiliary(
            "the multiscale benchmark trains variant 6, which needs several studies".into(),
        )));
    }
    let targets = resolve_targets(datasets, cfg)?;
    let arms = [("single", project_all(datasets, single_op)?),
        ("multiscale", project_all(datasets, multi_op)?)];

    let fingerprint = (
        "multiscale",
        cfg,
        folds,
        single_op.total_dim(),
        multi_op.total_dim(),
        datasets.iter().map(|d| (d.name.as_str(), d.n_samples(), d.dim())).collect::<Vec<_>>(),
    );
    let config_hash = hash_json(&fingerprint)?;

    let (records, timings) = run_folds(folds, cfg.jobs, |fold| {
        let fold_seed = cfg.seed + fold as u64;
        let mut records = Vec::new();
        let mut timings = Vec::new();
        for (arm, reduced) in &arms {
            let splits: Vec<_> = reduced
                .iter()
                .map(|ds| split_by_subject(ds, cfg.split_fraction, fold_seed))
                .collect::<cogfactor_core::Result<_>>()?;
            let train_sets: Vec<&StudyDataset> = splits.iter().map(|(tr, _)| tr).collect();
            // Both arms share one stream so identical projections give
            // identical accuracies; only the projection differs.
            let mut rng = rng_stream(fold_seed, &[6, 0x6d73]);
            let specs: Vec<HeadSpec> = train_sets.iter().map(|d| d.head_spec()).collect();
            let mut model = FactoredModel::init(
                train_sets[0].dim(),
                cfg.latent_dim,
                &specs,
                cfg.dropout_rate,
                &mut rng,
            )?;
            let train_cfg = cfg.train_config(train_sets.len(), fold_seed);
            let start = Instant::now();
            train(&mut model, &train_sets, &train_cfg, &mut rng)?;
            let secs = start.elapsed().as_secs_f64();
            for &t in &targets {
                let (train_ds, test_ds) = &splits[t];
                let acc = accuracy_factored(&model, t, test_ds.x.view(), &test_ds.labels)?;
                records.push(AccuracyRecord {
                    variant: 6,
                    target_study: test_ds.name.clone(),
                    train_subjects: train_ds.distinct_subjects().len(),
                    fold_seed,
                    test_accuracy: acc,
                    arm: arm.to_string(),
                });
                timings.push(TimingRecord {
                    variant: 6,
                    target_study: test_ds.name.clone(),
                    arm: arm.to_string(),
                    fold_seed,
                    seconds: secs,
                });
            }
        }
        Ok(FoldOutput { records, timings })
    })?;
    Ok(ExperimentReport::assemble(config_hash, records, timings))
}
