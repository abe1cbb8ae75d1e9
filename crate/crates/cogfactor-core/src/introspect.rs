//! Model introspection: collapsing the trained pipeline into voxel-space
//! classification maps, and summarizing the latent space with k-means
//! templates.
//!
//! At prediction time the three linear layers multiply out to one
//! matrix per study, `W_g W'_e W'_d`, whose columns are per-condition
//! brain maps. Independently, k-means centroids of the projected data
//! can be mapped backward to voxel-space templates and forward through
//! every head to per-study probability vectors, pairing each template
//! with the conditions it expresses.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{softmax_probs, FactoredModel};
use crate::projection::{Dictionary, ProjectionOperator};

/// Per-condition voxel maps of one study's collapsed classifier.
#[derive(Debug, Clone)]
pub struct ClassificationMaps {
    pub study: String,
    /// Shape `(voxels, n_conditions)`.
    pub maps: Array2<f64>,
    pub condition_names: Vec<String>,
}

/// Collapses projection, embedding and one head into voxel-space maps:
/// `maps = W_g (W'_e W'_d)`. Scoring raw samples against the maps plus
/// the head bias reproduces the pipeline's scores.
pub fn collapse(
    model: &FactoredModel,
    op: &ProjectionOperator,
    study: usize,
) -> Result<ClassificationMaps> {
    let head = model.head(study)?;
    if op.total_dim() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: alloc::format!("operator dim {}", op.total_dim()),
            got: alloc::format!("model input dim {}", model.input_dim()),
        });
    }
    let latent_maps = model.embedding.dot(&head.weights); // (g, k)
    let mut maps = Array2::<f64>::zeros((op.voxels(), head.n_conditions()));
    for (scale, range) in op.scale_offsets().iter().enumerate() {
        let chunk = latent_maps.slice(s![range.clone(), ..]);
        maps += &op.block(scale).dot(&chunk);
    }
    Ok(ClassificationMaps {
        study: head.name.clone(),
        maps,
        condition_names: head.condition_names.clone(),
    })
}

/// Output of [`kmeans`].
#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Shape `(k, dim)`.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Final within-cluster sum of squared distances.
    pub objective: f64,
}

// Restart count for Lloyd iterations; the best objective wins. Ten
// restarts make the small-instance optimum reliably reachable.
const KMEANS_RESTARTS: usize = 10;

/// Lloyd's algorithm with k-means++ seeding over the rows of `z`,
/// restarted [`KMEANS_RESTARTS`] times from the seeded generator. Stops
/// when assignments stop changing or after `max_iter` sweeps; empty
/// clusters are re-seeded to the point farthest from its centroid.
pub fn kmeans(z: ArrayView2<'_, f64>, k: usize, seed: u64, max_iter: usize) -> Result<KmeansResult> {
    let n = z.nrows();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewSamples { available: n, requested: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KmeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(z, k, max_iter, &mut rng);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn squared_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_seeding<R: Rng + ?Sized>(
    z: ArrayView2<'_, f64>,
    k: usize,
    rng: &mut R,
) -> Array2<f64> {
    let n = z.nrows();
    let dim = z.ncols();
    let mut centroids = Array2::<f64>::zeros((k, dim));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&z.row(first));
    let mut min_sq: Vec<f64> = (0..n).map(|i| squared_distance(z.row(i), z.row(first))).collect();
    for c in 1..k {
        let total: f64 = min_sq.iter().sum();
        let pick = if total > 0.0 {
            // Sample proportionally to squared distance via the
            // cumulative sum.
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in min_sq.iter().enumerate() {
                acc += d;
                if acc >= target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&z.row(pick));
        for (i, slot) in min_sq.iter_mut().enumerate() {
            let d = squared_distance(z.row(i), z.row(pick));
            if d < *slot {
                *slot = d;
            }
        }
    }
    centroids
}

#[allow(clippy::needless_range_loop)]
fn lloyd<R: Rng + ?Sized>(
    z: ArrayView2<'_, f64>,
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> KmeansResult {
    let n = z.nrows();
    let dim = z.ncols();
    let mut centroids = plus_plus_seeding(z, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut objective = f64::INFINITY;

    for _ in 0..max_iter.max(1) {
        // Assignment sweep.
        let mut changed = false;
        let mut new_objective = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = squared_distance(z.row(i), centroids.row(c));
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            new_objective += best_d;
        }
        // The Lloyd objective never increases between sweeps.
        debug_assert!(new_objective <= objective * (1.0 + 1e-9) + 1e-12);
        objective = new_objective;
        if !changed {
            break;
        }
        // Update sweep.
        let mut counts = vec![0usize; k];
        centroids.fill(0.0);
        for i in 0..n {
            counts[assignments[i]] += 1;
            let mut row = centroids.row_mut(assignments[i]);
            row += &z.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
            } else {
                // Re-seed an empty cluster to the farthest point.
                let mut far = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = squared_distance(z.row(i), centroids.row(assignments[i]));
                    if d > far_d {
                        far = i;
                        far_d = d;
                    }
                }
                centroids.row_mut(c).assign(&z.row(far));
            }
        }
        let _ = dim;
    }
    KmeansResult { centroids, assignments, objective }
}

/// A latent centroid with its voxel-space template and per-study
/// condition probabilities.
#[derive(Debug, Clone)]
pub struct LatentTemplate {
    pub centroid: Array1<f64>,
    /// Scale-averaged back-projection of the centroid, length `voxels`.
    pub template: Array1<f64>,
    /// One probability vector per study head.
    pub probabilities: Vec<Array1<f64>>,
    pub cluster_size: usize,
}

/// Builds one template per centroid, sorted by cluster size descending
/// (ties keep cluster-index order).
pub fn make_templates(
    model: &FactoredModel,
    op: &ProjectionOperator,
    dicts: &[Dictionary],
    clustering: &KmeansResult,
) -> Result<Vec<LatentTemplate>> {
    if clustering.centroids.ncols() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: alloc::format!("centroid width {}", model.input_dim()),
            got: alloc::format!("{}", clustering.centroids.ncols()),
        });
    }
    let k = clustering.centroids.nrows();
    let mut sizes = vec![0usize; k];
    for &a in &clustering.assignments {
        sizes[a] += 1;
    }
    let mut templates = Vec::with_capacity(k);
    for (c, centroid) in clustering.centroids.rows().into_iter().enumerate() {
        let template = op.reconstruct(dicts, centroid)?;
        let latent = centroid.dot(&model.embedding); // length l
        let probabilities = model
            .heads
            .iter()
            .map(|head| {
                let mut s = latent.dot(&head.weights);
                s += &head.bias;
                softmax_probs(s.view())
            })
            .collect();
        templates.push(LatentTemplate {
            centroid: centroid.to_owned(),
            template,
            probabilities,
            cluster_size: sizes[c],
        });
    }
    templates.sort_by_key(|t| core::cmp::Reverse(t.cluster_size));
    Ok(templates)
}
