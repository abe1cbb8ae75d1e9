//! The `cogfactor` command-line tool.
//!
//! Subcommands: `gen-synth`, `project`, `train`, `evaluate`, `ablate`,
//! `curves`, `multiscale`, `introspect`. Every command takes `--out DIR`
//! and an optional `--config FILE` (JSON). Precedence for every setting
//! is flag > config file > `COGFACTOR_SEED` (seed only) > built-in
//! default, and the fully resolved configuration is echoed to
//! `<out>/config.json`, which can itself be passed back as `--config`.
//! Outputs are written atomically; errors leave as JSON on stderr with a
//! nonzero exit code.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cogfactor_core::data::{
    block_dictionary, generate_synthetic, FeatureKind, StudyDataset, SynthConfig, SynthStudySpec,
};
use cogfactor_core::introspect::{collapse, kmeans, make_templates};
use cogfactor_core::metrics::accuracy_factored;
use cogfactor_core::model::{FactoredModel, HeadSpec};
use cogfactor_core::optim::{train, TrainConfig};
use cogfactor_core::projection::{assemble_multiscale, Dictionary, DEFAULT_RCOND};

use crate::error::{Error, Result};
use crate::eval::{learning_curve, multiscale_benchmark, run_ablation, HarnessConfig};
use crate::io::{
    atomic_write, load_dataset, load_dictionary, load_model, read_json, save_dataset,
    save_dictionary, save_model, write_json,
};
use crate::ndt::{write_tensor, NdtTensor};
use crate::report::write_report;

#[derive(Parser)]
#[command(
    name = "cogfactor",
    about = "Multi-study decoding: synthetic data, projection, training, experiments",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-study datasets and block dictionaries
    GenSynth(GenSynthArgs),
    /// Project raw datasets through dictionaries to reduced loadings
    Project(ProjectArgs),
    /// Train the factored model on reduced datasets
    Train(TrainArgs),
    /// Score a checkpoint on reduced datasets
    Evaluate(EvaluateArgs),
    /// Run the six-variant ablation over subject-split folds
    Ablate(AblateArgs),
    /// Learning curves of variants 4 and 6 over training subjects
    Curves(CurvesArgs),
    /// Paired single-scale versus multi-scale projection benchmark
    Multiscale(MultiscaleArgs),
    /// Collapse a checkpoint into maps and latent k-means templates
    Introspect(IntrospectArgs),
}

pub fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Project(args) => cmd_project(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Curves(args) => cmd_curves(args),
        Command::Multiscale(args) => cmd_multiscale(args),
        Command::Introspect(args) => cmd_introspect(args),
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("COGFACTOR_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Invalid(format!("COGFACTOR_SEED is not a u64: {text:?}"))),
        Err(_) => Ok(None),
    }
}

fn pick_seed(flag: Option<u64>, file: Option<u64>, default: u64) -> Result<u64> {
    Ok(match flag.or(file) {
        Some(seed) => seed,
        None => env_seed()?.unwrap_or(default),
    })
}

fn load_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(path) => read_json(path),
        None => Ok(T::default()),
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn load_datasets(paths: &[PathBuf]) -> Result<Vec<StudyDataset>> {
    if paths.is_empty() {
        return Err(Error::Invalid("at least one dataset directory required".into()));
    }
    paths.iter().map(|p| load_dataset(p)).collect()
}

fn load_dictionaries(paths: &[PathBuf]) -> Result<Vec<Dictionary>> {
    if paths.is_empty() {
        return Err(Error::Invalid("at least one dictionary required".into()));
    }
    paths.iter().map(|p| load_dictionary(p)).collect()
}

fn require_reduced(datasets: &[StudyDataset]) -> Result<()> {
    for ds in datasets {
        if ds.kind != FeatureKind::Reduced {
            return Err(Error::Invalid(format!(
                "dataset {} holds raw samples; run `cogfactor project` first",
                ds.name
            )));
        }
    }
    Ok(())
}

/// `conditions:subjects:samples_per_condition` triplet list.
fn parse_studies(text: &str) -> Result<Vec<SynthStudySpec>> {
    text.split(',')
        .map(|part| {
            let fields: Vec<&str> = part.trim().split(':').collect();
            if fields.len() != 3 {
                return Err(Error::Invalid(format!(
                    "study spec {part:?} is not conditions:subjects:samples_per_condition"
                )));
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Invalid(format!("bad study field {s:?} in {part:?}")))
            };
            Ok(SynthStudySpec {
                conditions: parse(fields[0])?,
                subjects: parse(fields[1])?,
                samples_per_condition: parse(fields[2])?,
            })
        })
        .collect()
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad integer {s:?} in list")))
        })
        .collect()
}

fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Invalid(format!("bad number {s:?} in list")))
        })
        .collect()
}

// ---------------------------------------------------------------- gen-synth

#[derive(Args)]
struct GenSynthArgs {
    /// Voxel count p
    #[arg(long)]
    voxels: Option<usize>,
    /// Generative latent dimension
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Studies as conditions:subjects:samples_per_condition triplets
    /// [default: 8:24:2,12:10:2,16:14:2,23:32:2]
    #[arg(long)]
    studies: Option<String>,
    /// Latent subject offset level [default: 1.0]
    #[arg(long)]
    subject_noise: Option<f64>,
    /// Per-voxel trial noise level [default: 0.5]
    #[arg(long)]
    trial_noise: Option<f64>,
    /// Fraction of conditions drawn from the shared pool [default: 0.7]
    #[arg(long)]
    shared_fraction: Option<f64>,
    /// Spatial block scales of the latent basis [default: 16,128]
    #[arg(long)]
    scales: Option<String>,
    /// Component counts of the emitted dictionaries [default: 16,64,512]
    #[arg(long)]
    dict_sizes: Option<String>,
    /// Amplitude jitter of dictionary components [default: 0.2]
    #[arg(long)]
    dict_jitter: Option<f64>,
    /// Base random seed [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file (flags take precedence)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct GenSynthFile {
    voxels: Option<usize>,
    latent_dim: Option<usize>,
    studies: Option<String>,
    subject_noise: Option<f64>,
    trial_noise: Option<f64>,
    shared_fraction: Option<f64>,
    scales: Option<String>,
    dict_sizes: Option<String>,
    dict_jitter: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenSynthResolved {
    voxels: usize,
    latent_dim: usize,
    studies: String,
    subject_noise: f64,
    trial_noise: f64,
    shared_fraction: f64,
    scales: String,
    dict_sizes: String,
    dict_jitter: f64,
    seed: u64,
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let file: GenSynthFile = load_config(&args.config)?;
    let defaults = SynthConfig::default();
    let resolved = GenSynthResolved {
        voxels: pick(args.voxels, file.voxels, defaults.voxels),
        latent_dim: pick(args.latent_dim, file.latent_dim, defaults.latent_dim),
        studies: pick(args.studies, file.studies, "8:24:2,12:10:2,16:14:2,23:32:2".into()),
        subject_noise: pick(args.subject_noise, file.subject_noise, defaults.subject_noise),
        trial_noise: pick(args.trial_noise, file.trial_noise, defaults.trial_noise),
        shared_fraction: pick(args.shared_fraction, file.shared_fraction, defaults.shared_fraction),
        scales: pick(args.scales, file.scales, "16,128".into()),
        dict_sizes: pick(args.dict_sizes, file.dict_sizes, "16,64,512".into()),
        dict_jitter: pick(args.dict_jitter, file.dict_jitter, 0.2),
        seed: pick_seed(args.seed, file.seed, defaults.seed)?,
    };

    let cfg = SynthConfig {
        voxels: resolved.voxels,
        latent_dim: resolved.latent_dim,
        studies: parse_studies(&resolved.studies)?,
        subject_noise: resolved.subject_noise,
        trial_noise: resolved.trial_noise,
        shared_fraction: resolved.shared_fraction,
        scales: parse_usize_list(&resolved.scales)?,
        seed: resolved.seed,
    };
    let (datasets, _truth) = generate_synthetic(&cfg)?;

    prepare_out(&args.out)?;
    write_json(&args.out.join("config.json"), &resolved)?;
    for ds in &datasets {
        save_dataset(&args.out.join("data").join(&ds.name), ds)?;
    }
    let mut dict_rng = ChaCha8Rng::seed_from_u64(resolved.seed ^ 0xd1c7);
    for &size in &parse_usize_list(&resolved.dict_sizes)? {
        let dict = block_dictionary(
            format!("scale_{size}"),
            resolved.voxels,
            size,
            resolved.dict_jitter,
            &mut dict_rng,
        )?;
        save_dictionary(&args.out.join("dicts").join(format!("scale_{size}")), &dict, false)?;
    }
    eprintln!(
        "gen-synth: wrote {} studies and dictionaries to {}",
        datasets.len(),
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ project

#[derive(Args)]
struct ProjectArgs {
    /// Raw dataset directories
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    data: Vec<PathBuf>,
    /// Dictionary stems or sidecar paths, coarse to fine
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    dicts: Vec<PathBuf>,
    /// Reciprocal condition cutoff for Gram inversion [default: 1e-10]
    #[arg(long)]
    rcond: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ProjectFile {
    rcond: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProjectResolved {
    data: Vec<PathBuf>,
    dicts: Vec<PathBuf>,
    rcond: f64,
}

#[derive(Debug, Serialize)]
struct ProjectionSummary {
    total_dim: usize,
    voxels: usize,
    scales: Vec<ScaleSummary>,
}

#[derive(Debug, Serialize)]
struct ScaleSummary {
    name: String,
    components: usize,
    offset_start: usize,
    offset_end: usize,
}

fn cmd_project(args: ProjectArgs) -> Result<()> {
    let file: ProjectFile = load_config(&args.config)?;
    let resolved = ProjectResolved {
        data: args.data.clone(),
        dicts: args.dicts.clone(),
        rcond: pick(args.rcond, file.rcond, DEFAULT_RCOND),
    };
    let datasets = load_datasets(&resolved.data)?;
    let dicts = load_dictionaries(&resolved.dicts)?;
    let op = assemble_multiscale(&dicts, resolved.rcond)?;

    prepare_out(&args.out)?;
    write_json(&args.out.join("config.json"), &resolved)?;
    for ds in &datasets {
        let reduced = ds.with_features(op.project(ds.x.view())?, FeatureKind::Reduced)?;
        save_dataset(&args.out.join(&ds.name), &reduced)?;
    }
    let summary = ProjectionSummary {
        total_dim: op.total_dim(),
        voxels: op.voxels(),
        scales: dicts
            .iter()
            .zip(op.scale_offsets())
            .map(|(d, range)| ScaleSummary {
                name: d.name().to_string(),
                components: d.n_components(),
                offset_start: range.start,
                offset_end: range.end,
            })
            .collect(),
    };
    write_json(&args.out.join("projection.json"), &summary)?;
    eprintln!(
        "project: reduced {} datasets to {} dims",
        datasets.len(),
        op.total_dim()
    );
    Ok(())
}

// -------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// Reduced dataset directories
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    data: Vec<PathBuf>,
    /// Latent dimension l [default: 100]
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Latent dropout rate r [default: 0.75]
    #[arg(long)]
    dropout: Option<f64>,
    /// Mini-batch size [default: 256]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Total training iterations [default: 3000]
    #[arg(long)]
    iterations: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// L2 strength on the factored weights [default: 0]
    #[arg(long)]
    l2: Option<f64>,
    /// Base random seed [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    latent_dim: Option<usize>,
    dropout: Option<f64>,
    batch_size: Option<usize>,
    iterations: Option<usize>,
    learning_rate: Option<f64>,
    l2: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainResolved {
    data: Vec<PathBuf>,
    latent_dim: usize,
    dropout: f64,
    batch_size: usize,
    iterations: usize,
    learning_rate: f64,
    l2: f64,
    seed: u64,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file: TrainFile = load_config(&args.config)?;
    let resolved = TrainResolved {
        data: args.data.clone(),
        latent_dim: pick(args.latent_dim, file.latent_dim, 100),
        dropout: pick(args.dropout, file.dropout, 0.75),
        batch_size: pick(args.batch_size, file.batch_size, 256),
        iterations: pick(args.iterations, file.iterations, 3000),
        learning_rate: pick(args.learning_rate, file.learning_rate, 1e-3),
        l2: pick(args.l2, file.l2, 0.0),
        seed: pick_seed(args.seed, file.seed, 42)?,
    };
    let datasets = load_datasets(&resolved.data)?;
    require_reduced(&datasets)?;
    let dim = datasets[0].dim();
    for ds in &datasets {
        if ds.dim() != dim {
            return Err(Error::Invalid(format!(
                "dataset {} has {} features, expected {dim}",
                ds.name,
                ds.dim()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(resolved.seed);
    let specs: Vec<HeadSpec> = datasets.iter().map(|d| d.head_spec()).collect();
    let mut model =
        FactoredModel::init(dim, resolved.latent_dim, &specs, resolved.dropout, &mut rng)?;
    let cfg = TrainConfig {
        batch_size: resolved.batch_size,
        max_iterations: resolved.iterations,
        learning_rate: resolved.learning_rate,
        seed: resolved.seed,
        dropout_rate: resolved.dropout,
        l2: resolved.l2,
    };
    let refs: Vec<&StudyDataset> = datasets.iter().collect();
    let trace = train(&mut model, &refs, &cfg, &mut rng)?;

    prepare_out(&args.out)?;
    write_json(&args.out.join("config.json"), &resolved)?;
    save_model(&args.out.join("checkpoint"), &model)?;
    let mut csv = String::from("iteration,study,loss\n");
    for entry in &trace {
        csv.push_str(&format!("{},{},{:.17}\n", entry.iteration, entry.study, entry.loss));
    }
    atomic_write(&args.out.join("trace.csv"), csv.as_bytes())?;
    if let Some(last) = trace.last() {
        eprintln!("train: {} iterations, final batch loss {:.4}", trace.len(), last.loss);
    } else {
        eprintln!("train: 0 iterations, checkpoint equals initialization");
    }
    Ok(())
}

// ----------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reduced dataset directories to score
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    data: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct EvaluateRecord {
    study: String,
    n_samples: usize,
    accuracy: f64,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let _: serde_json::Value = match &args.config {
        Some(path) => read_json(path)?,
        None => serde_json::Value::Null,
    };
    let model = load_model(&args.checkpoint)?;
    let datasets = load_datasets(&args.data)?;
    require_reduced(&datasets)?;

    let mut records = Vec::new();
    for ds in &datasets {
        let study = model
            .heads
            .iter()
            .position(|h| h.name == ds.name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no head for {}", ds.name)))?;
        let accuracy = accuracy_factored(&model, study, ds.x.view(), &ds.labels)?;
        records.push(EvaluateRecord { study: ds.name.clone(), n_samples: ds.n_samples(), accuracy });
    }
    prepare_out(&args.out)?;
    write_json(
        &args.out.join("config.json"),
        &serde_json::json!({ "checkpoint": args.checkpoint, "data": args.data }),
    )?;
    write_json(&args.out.join("accuracy.json"), &records)?;
    let mut csv = String::from("study,n_samples,accuracy\n");
    for r in &records {
        csv.push_str(&format!("{},{},{:.17}\n", r.study, r.n_samples, r.accuracy));
    }
    atomic_write(&args.out.join("accuracy.csv"), csv.as_bytes())?;
    for r in &records {
        eprintln!("evaluate: {} accuracy {:.4}", r.study, r.accuracy);
    }
    Ok(())
}

// ----------------------------------------------------- shared harness flags

#[derive(Args)]
struct HarnessArgs {
    /// Mini-batch size [default: 256]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Latent dropout rate of factored variants [default: 0.75]
    #[arg(long)]
    dropout: Option<f64>,
    /// Latent dimension l [default: 100]
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Factored iterations per participating study [default: 400]
    #[arg(long)]
    iterations_per_study: Option<usize>,
    /// Plain-baseline training iterations [default: 150]
    #[arg(long)]
    baseline_iterations: Option<usize>,
    /// L2 grid for nested selection
    /// [default: 1e-6,1e-5,1e-4,1e-3,1e-2,1e-1,1,10,100]
    #[arg(long)]
    lambda_grid: Option<String>,
    /// Input-dropout grid for variant 3 [default: 0.25,0.5,0.75]
    #[arg(long)]
    dropout_grid: Option<String>,
    /// Nested validation splits per fold [default: 1]
    #[arg(long)]
    inner_folds: Option<usize>,
    /// Fraction of subjects held out for testing [default: 0.5]
    #[arg(long)]
    split_fraction: Option<f64>,
    /// Base random seed; fold f uses seed + f [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// Target study names (comma separated); default: all but the
    /// largest study
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,
    /// Worker threads for fold-level parallelism [default: 1]
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct HarnessFile {
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    dropout: Option<f64>,
    latent_dim: Option<usize>,
    iterations_per_study: Option<usize>,
    baseline_iterations: Option<usize>,
    lambda_grid: Option<String>,
    dropout_grid: Option<String>,
    inner_folds: Option<usize>,
    split_fraction: Option<f64>,
    seed: Option<u64>,
    targets: Option<Vec<String>>,
    jobs: Option<usize>,
    folds: Option<usize>,
    variants: Option<String>,
    rcond: Option<f64>,
    target: Option<String>,
    grid: Option<String>,
    clusters: Option<usize>,
    kmeans_max_iter: Option<usize>,
}

fn resolve_harness(args: &HarnessArgs, file: &HarnessFile) -> Result<HarnessConfig> {
    let defaults = HarnessConfig::default();
    Ok(HarnessConfig {
        batch_size: pick(args.batch_size, file.batch_size, defaults.batch_size),
        learning_rate: pick(args.learning_rate, file.learning_rate, defaults.learning_rate),
        dropout_rate: pick(args.dropout, file.dropout, defaults.dropout_rate),
        latent_dim: pick(args.latent_dim, file.latent_dim, defaults.latent_dim),
        iterations_per_study: pick(
            args.iterations_per_study,
            file.iterations_per_study,
            defaults.iterations_per_study,
        ),
        baseline_iterations: pick(
            args.baseline_iterations,
            file.baseline_iterations,
            defaults.baseline_iterations,
        ),
        lambda_grid: match pick(args.lambda_grid.clone(), file.lambda_grid.clone(), String::new())
        {
            ref s if s.is_empty() => defaults.lambda_grid,
            s => parse_f64_list(&s)?,
        },
        dropout_grid: match pick(
            args.dropout_grid.clone(),
            file.dropout_grid.clone(),
            String::new(),
        ) {
            ref s if s.is_empty() => defaults.dropout_grid,
            s => parse_f64_list(&s)?,
        },
        inner_folds: pick(args.inner_folds, file.inner_folds, defaults.inner_folds),
        split_fraction: pick(args.split_fraction, file.split_fraction, defaults.split_fraction),
        seed: pick_seed(args.seed, file.seed, defaults.seed)?,
        targets: args.targets.clone().or_else(|| file.targets.clone()),
        jobs: pick(args.jobs, file.jobs, defaults.jobs),
    })
}

// ------------------------------------------------------------------- ablate

#[derive(Args)]
struct AblateArgs {
    /// Raw dataset directories
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    data: Vec<PathBuf>,
    /// Dictionary stems (required for variants 2-6)
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    dicts: Vec<PathBuf>,
    /// Ablation variants to run [default: 1,2,3,4,5,6]
    #[arg(long)]
    variants: Option<String>,
    /// Number of subject-split folds [default: 20]
    #[arg(long)]
    folds: Option<usize>,
    /// Reciprocal condition cutoff for Gram inversion [default: 1e-10]
    #[arg(long)]
    rcond: Option<f64>,
    #[command(flatten)]
    harness: HarnessArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct AblateResolved {
    data: Vec<PathBuf>,
    dicts: Vec<PathBuf>,
    variants: Vec<u8>,
    folds: usize,
    rcond: f64,
    #[serde(flatten)]
    harness: HarnessConfig,
}

fn parse_variants(text: &str) -> Result<Vec<u8>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u8>()
                .map_err(|_| Error::Invalid(format!("bad variant {s:?}")))
        })
        .collect()
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let file: HarnessFile = load_config(&args.config)?;
    let harness = resolve_harness(&args.harness, &file)?;
    let variants = parse_variants(&pick(
        args.variants.clone(),
        file.variants.clone(),
        "1,2,3,4,5,6".into(),
    ))?;
    let folds = pick(args.folds, file.folds, 20);
    let rcond = pick(args.rcond, file.rcond, DEFAULT_RCOND);

    let datasets = load_datasets(&args.data)?;
    let op = if args.dicts.is_empty() {
        None
    } else {
        Some(assemble_multiscale(&load_dictionaries(&args.dicts)?, rcond)?)
    };

    let resolved = AblateResolved {
        data: args.data.clone(),
        dicts: args.dicts.clone(),
        variants: variants.clone(),
        folds,
        rcond,
        harness: harness.clone(),
    };
    prepare_out(&args.out)?;
    write_json(&args.out.join("config.json"), &resolved)?;

    let report = run_ablation(&datasets, op.as_ref(), &variants, folds, &harness)?;
    write_report(&args.out, "ablation", &report)?;
    for &variant in &variants {
        for ds in &datasets {
            if let Some(mean) = report.mean_accuracy(variant, &ds.name, "") {
                eprintln!("ablate: variant {variant} {} mean accuracy {:.4}", ds.name, mean);
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- curves

#[derive(Args)]
struct CurvesArgs {
    /// Raw dataset directories
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    data: Vec<PathBuf>,
    /// Dictionary stems
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    dicts: Vec<PathBuf>,
    /// Target study name [default: first dataset]
    #[arg(long)]
    target: Option<String>,
    /// Training-subject grid; "half" = the full training half
    /// [default: 5,10,20,half]
    #[arg(long)]
    grid: Option<String>,
    /// Number of subject-split folds [default: 20]
    #[arg(long)]
    folds: Option<usize>,
    /// Reciprocal condition cutoff for Gram inversion [default: 1e-10]
    #[arg(long)]
    rcond: Option<f64>,
    #[command(flatten)]
    harness: HarnessArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct CurvesResolved {
    data: Vec<PathBuf>,
    dicts: Vec<PathBuf>,
    target: String,
    grid: Vec<usize>,
    folds: usize,
    rcond: f64,
    #[serde(flatten)]
    harness: HarnessConfig,
}

/// Resolves grid tokens; "half" becomes the size of the training half
/// under the configured split fraction.
fn resolve_grid(text: &str, target: &StudyDataset, split_fraction: f64) -> Result<Vec<usize>> {
    let n_subjects = target.distinct_subjects().len();
    let test = (split_fraction * n_subjects as f64).ceil() as usize;
    let half = n_subjects.saturating_sub(test);
    let mut grid = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        if token == "half" {
            grid.push(half);
        } else {
            let value = token
                .parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad grid value {token:?}")))?;
            grid.push(value);
        }
    }
    grid.sort_unstable();
    grid.dedup();
    // Values beyond the training half are unreachable in every fold.
    grid.retain(|&v| v >= 1 && v <= half);
    Ok(grid)
}

fn cmd_curves(args: CurvesArgs) -> Result<()> {
    let file: HarnessFile = load_config(&args.config)?;
    let harness = resolve_harness(&args.harness, &file)?;
    let folds = pick(args.folds, file.folds, 20);
    let rcond = pick(args.rcond, file.rcond, DEFAULT_RCOND);
    let datasets = load_datasets(&args.data)?;
    let target = pick(args.target.clone(), file.target.clone(), datasets[0].name.clone());
    let target_ds = datasets
        .iter()
        .find(|d| d.name == target)
        .ok_or_else(|| Error::Invalid(format!("no study named {target:?}")))?;
    let grid_text = pick(args.grid.clone(), file.grid.clone(), "5,10,20,half".into());
    let grid = resolve_grid(&grid_text, target_ds, harness.split_fraction)?;
    let op = assemble_multiscale(&load_dictionaries(&args.dicts)?, rcond)?;

    let resolved = CurvesResolved {
        data: args.data.clone(),
        dicts: args.dicts.clone(),
        target: target.clone(),
        grid: grid.clone(),
        folds,
        rcond,
        harness: harness.clone(),
    };
    prepare_out(&args.out)?;
    write_json(&args.out.join("config.json"), &resolved)?;

    let report = learning_curve(&datasets, &op, &target, &grid, folds, &harness)?;
    write_report(&args.out, "curves", &report)?;
    for &n in &grid {
        let v4: Vec<f64> = report
            .records
            .iter()
            .filter(|r| r.variant == 4 && r.train_subjects == n)
            .map(|r| r.test_accuracy)
            .collect();
        let v6: Vec<f64> = report
            .records
            .iter()
            .filter(|r| r.variant == 6 && r.train_subjects == n)
            .map(|r| r.test_accuracy)
            .collect();
        if !v4.is_empty() {
            eprintln!(
                "curves: {n} subjects: single {:.4}, multi {:.4}",
                v4.iter().sum::<f64>() / v4.len() as f64,
                v6.iter().sum::<f64>() / v6.len() as f64
            );
        }
    }
    Ok(())
}

// --------------------------------------------------------------- multiscale

#[derive(Args)]
struct MultiscaleArgs {
    /// Raw dataset directories
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    data: Vec<PathBuf>,
    /// Single-scale dictionary stems
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    single_dicts: Vec<PathBuf>,
    /// Multi-scale dictionary stems
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    multi_dicts: Vec<PathBuf>,
    /// Number of subject-split folds [default: 20]
    #[arg(long)]
    folds: Option<usize>,
    /// Reciprocal condition cutoff for Gram inversion [default: 1e-10]
    #[arg(long)]
    rcond: Option<f64>,
    #[command(flatten)]
    harness: HarnessArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct MultiscaleResolved {
    data: Vec<PathBuf>,
    single_dicts: Vec<PathBuf>,
    multi_dicts: Vec<PathBuf>,
    folds: usize,
    rcond: f64,
    #[serde(flatten)]
    harness: HarnessConfig,
}

fn cmd_multiscale(args: MultiscaleArgs) -> Result<()> {
    let file: HarnessFile = load_config(&args.config)?;
    let harness = resolve_harness(&args.harness, &file)?;
    let folds = pick(args.folds, file.folds, 20);
    let rcond = pick(args.rcond, file.rcond, DEFAULT_RCOND);
    let datasets = load_datasets(&args.data)?;
    let single_op = assemble_multiscale(&load_dictionaries(&args.single_dicts)?, rcond)?;
    let multi_op = assemble_multiscale(&load_dictionaries(&args.multi_dicts)?, rcond)?;

    let resolved = MultiscaleResolved {
        data: args.data.clone(),
        single_dicts: args.single_dicts.clone(),
        multi_dicts: args.multi_dicts.clone(),
        folds,
        rcond,
        harness: harness.clone(),
    };
    prepare_out(&args.out)?;
    write_json(&args.out.join("config.json"), &resolved)?;

    let report = multiscale_benchmark(&single_op, &multi_op, &datasets, folds, &harness)?;
    write_report(&args.out, "multiscale", &report)?;
    for arm in ["single", "multiscale"] {
        let values: Vec<f64> = report
            .records
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.test_accuracy)
            .collect();
        if !values.is_empty() {
            eprintln!(
                "multiscale: {arm} mean accuracy {:.4}",
                values.iter().sum::<f64>() / values.len() as f64
            );
        }
    }
    Ok(())
}

// --------------------------------------------------------------- introspect

#[derive(Args)]
struct IntrospectArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dictionary stems used to train the checkpoint
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    dicts: Vec<PathBuf>,
    /// Datasets whose projected samples feed the k-means (raw datasets
    /// are projected on the fly)
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    data: Vec<PathBuf>,
    /// Number of latent clusters [default: 50]
    #[arg(long)]
    clusters: Option<usize>,
    /// Lloyd iteration cap [default: 300]
    #[arg(long)]
    kmeans_max_iter: Option<usize>,
    /// Reciprocal condition cutoff for Gram inversion [default: 1e-10]
    #[arg(long)]
    rcond: Option<f64>,
    /// Base random seed [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct IntrospectResolved {
    checkpoint: PathBuf,
    dicts: Vec<PathBuf>,
    data: Vec<PathBuf>,
    clusters: usize,
    kmeans_max_iter: usize,
    rcond: f64,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct MapsManifest {
    studies: Vec<MapsEntry>,
}

#[derive(Debug, Serialize)]
struct MapsEntry {
    name: String,
    file: String,
    condition_names: Vec<String>,
}

#[derive(Debug, Serialize)]
struct TemplateEntry {
    rank: usize,
    cluster_size: usize,
    template_file: String,
    /// Ranked (condition, probability) table per study.
    probabilities: Vec<TemplateStudyProbs>,
}

#[derive(Debug, Serialize)]
struct TemplateStudyProbs {
    study: String,
    conditions: Vec<(String, f64)>,
}

fn cmd_introspect(args: IntrospectArgs) -> Result<()> {
    let file: HarnessFile = load_config(&args.config)?;
    let resolved = IntrospectResolved {
        checkpoint: args.checkpoint.clone(),
        dicts: args.dicts.clone(),
        data: args.data.clone(),
        clusters: pick(args.clusters, file.clusters, 50),
        kmeans_max_iter: pick(args.kmeans_max_iter, file.kmeans_max_iter, 300),
        rcond: pick(args.rcond, file.rcond, DEFAULT_RCOND),
        seed: pick_seed(args.seed, file.seed, 42)?,
    };
    let model = load_model(&resolved.checkpoint)?;
    let dicts = load_dictionaries(&resolved.dicts)?;
    let op = assemble_multiscale(&dicts, resolved.rcond)?;
    if op.total_dim() != model.input_dim() {
        return Err(Error::Invalid(format!(
            "dictionaries give {} dims but the checkpoint expects {}",
            op.total_dim(),
            model.input_dim()
        )));
    }
    let datasets = load_datasets(&resolved.data)?;

    prepare_out(&args.out)?;
    write_json(&args.out.join("config.json"), &resolved)?;

    // Collapsed per-condition maps, one file per study.
    let maps_dir = args.out.join("maps");
    std::fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
    let mut entries = Vec::new();
    for study in 0..model.n_studies() {
        let maps = collapse(&model, &op, study)?;
        let file_name = format!("{}.ndt", maps.study);
        write_tensor(maps_dir.join(&file_name), &NdtTensor::from_array2(&maps.maps))?;
        entries.push(MapsEntry {
            name: maps.study,
            file: file_name,
            condition_names: maps.condition_names,
        });
    }
    write_json(&maps_dir.join("manifest.json"), &MapsManifest { studies: entries })?;

    // Pool projected samples from every dataset for the latent k-means.
    let mut rows = 0;
    let mut pooled: Option<Array2<f64>> = None;
    for ds in &datasets {
        let z = match ds.kind {
            FeatureKind::Reduced => ds.x.clone(),
            FeatureKind::Raw => op.project(ds.x.view())?,
        };
        if z.ncols() != model.input_dim() {
            return Err(Error::Invalid(format!(
                "dataset {} has {} features, expected {}",
                ds.name,
                z.ncols(),
                model.input_dim()
            )));
        }
        rows += z.nrows();
        pooled = Some(match pooled {
            None => z,
            Some(acc) => {
                ndarray::concatenate(ndarray::Axis(0), &[acc.view(), z.view()])
                    .map_err(|e| Error::Invalid(e.to_string()))?
            }
        });
    }
    let pooled = pooled.ok_or_else(|| Error::Invalid("no data provided".into()))?;
    eprintln!("introspect: clustering {rows} projected samples into {} groups", resolved.clusters);
    let clustering = kmeans(pooled.view(), resolved.clusters, resolved.seed, resolved.kmeans_max_iter)?;
    let templates = make_templates(&model, &op, &dicts, &clustering)?;

    let templates_dir = args.out.join("templates");
    std::fs::create_dir_all(&templates_dir).map_err(|e| Error::io(&templates_dir, e))?;
    let mut entries = Vec::new();
    for (rank, template) in templates.iter().enumerate() {
        let file_name = format!("template_{rank:03}.ndt");
        write_tensor(templates_dir.join(&file_name), &NdtTensor::from_array1(&template.template))?;
        let probabilities = model
            .heads
            .iter()
            .zip(&template.probabilities)
            .map(|(head, probs)| {
                let mut conditions: Vec<(String, f64)> = head
                    .condition_names
                    .iter()
                    .cloned()
                    .zip(probs.iter().copied())
                    .collect();
                conditions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
                TemplateStudyProbs { study: head.name.clone(), conditions }
            })
            .collect();
        entries.push(TemplateEntry {
            rank,
            cluster_size: template.cluster_size,
            template_file: file_name,
            probabilities,
        });
    }
    write_json(&templates_dir.join("templates.json"), &entries)?;
    eprintln!("introspect: wrote {} maps and {} templates", model.n_studies(), templates.len());
    Ok(())
}
