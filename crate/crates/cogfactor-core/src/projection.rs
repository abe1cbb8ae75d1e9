//! Fixed first-layer dimension reduction from sparse spatial dictionaries.
//!
//! A dictionary is a sparse nonnegative matrix `D` of shape
//! `(voxels, components)`. The projection that maximally preserves
//! Euclidean distance is the orthogonal one, `W = D (DᵀD)⁻¹`, so that
//! `Dᵀ W = I`. Several dictionaries of different component counts are
//! combined by concatenating their per-scale loadings `Wᵀ x`, which gives
//! the reduced representation access to network activations at multiple
//! coarseness levels.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::math::{self, Cholesky};

/// Reciprocal-condition cutoff used by default when inverting Gram
/// matrices. Dictionaries are near-orthogonal by construction, so a
/// direct solve is stable; the cutoff turns silent instability into
/// [`Error::GramSingular`].
pub const DEFAULT_RCOND: f64 = 1e-10;

/// A sparse nonnegative spatial dictionary, stored dense.
///
/// Invariants checked at construction: all entries nonnegative and no
/// all-zero column. Column independence is only established when the
/// projection is computed, via the Gram condition cutoff.
#[derive(Debug, Clone)]
pub struct Dictionary {
    name: String,
    components: Array2<f64>,
}

impl Dictionary {
    pub fn new(name: impl Into<String>, components: Array2<f64>) -> Result<Self> {
        let name = name.into();
        if components.nrows() == 0 || components.ncols() == 0 {
            return Err(Error::InvalidDictionary(format!(
                "dictionary {name} has empty shape {:?}",
                components.dim()
            )));
        }
        if components.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidDictionary(format!(
                "dictionary {name} has a negative or non-finite entry"
            )));
        }
        for (j, col) in components.columns().into_iter().enumerate() {
            if col.iter().all(|v| *v == 0.0) {
                return Err(Error::InvalidDictionary(format!(
                    "dictionary {name} column {j} is all zero"
                )));
            }
        }
        Ok(Self { name, components })
    }

    /// Builds a dictionary from coordinate triplets `(row, col, value)`.
    /// Duplicate coordinates are summed.
    pub fn from_coo(
        name: impl Into<String>,
        voxels: usize,
        components: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let name = name.into();
        let mut dense = Array2::<f64>::zeros((voxels, components));
        for &(row, col, value) in triplets {
            if row >= voxels || col >= components {
                return Err(Error::InvalidDictionary(format!(
                    "triplet ({row}, {col}) outside shape ({voxels}, {components})"
                )));
            }
            dense[(row, col)] += value;
        }
        Self::new(name, dense)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn components(&self) -> ArrayView2<'_, f64> {
        self.components.view()
    }

    /// Number of voxels `p`.
    pub fn voxels(&self) -> usize {
        self.components.nrows()
    }

    /// Number of components `g_s`.
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }
}

/// Computes the per-scale orthogonal projection `W = D (DᵀD)⁻¹`.
///
/// Fails with [`Error::GramSingular`] when the Gram matrix cannot be
/// factorized or its estimated condition number exceeds `1/rcond`.
pub fn compute_projection(dict: &Dictionary, rcond: f64) -> Result<Array2<f64>> {
    if rcond.is_nan() || rcond <= 0.0 {
        return Err(Error::InvalidConfig(format!("rcond must be positive, got {rcond}")));
    }
    let d = dict.components();
    let g = dict.n_components();
    let gram = d.t().dot(&d);
    let chol = Cholesky::decompose(gram.view())
        .ok_or(Error::GramSingular { condition: f64::INFINITY, rcond })?;
    let condition = math::spd_condition_estimate(gram.view(), &chol);
    if condition > 1.0 / rcond {
        return Err(Error::GramSingular { condition, rcond });
    }
    // W = D G⁻¹ row by row: each row of W solves G w = d_row (G symmetric).
    let mut projection = Array2::<f64>::zeros((dict.voxels(), g));
    let mut solved = Array1::zeros(g);
    for (row, mut out_row) in d.rows().into_iter().zip(projection.rows_mut()) {
        chol.solve_into(row, &mut solved);
        out_row.assign(&solved);
    }
    Ok(projection)
}

/// The assembled multi-scale projection: one block `W_s = D_s (D_sᵀD_s)⁻¹`
/// per dictionary, applied by concatenating per-scale loadings.
#[derive(Debug, Clone)]
pub struct ProjectionOperator {
    blocks: Vec<Array2<f64>>,
    scale_offsets: Vec<Range<usize>>,
    voxels: usize,
    total_dim: usize,
}

/// Builds a [`ProjectionOperator`] from dictionaries sharing a voxel count.
/// Block order matches input order.
pub fn assemble_multiscale(dicts: &[Dictionary], rcond: f64) -> Result<ProjectionOperator> {
    let first = dicts
        .first()
        .ok_or_else(|| Error::InvalidConfig("at least one dictionary required".into()))?;
    let voxels = first.voxels();
    let mut blocks = Vec::with_capacity(dicts.len());
    let mut scale_offsets = Vec::with_capacity(dicts.len());
    let mut offset = 0;
    for dict in dicts {
        if dict.voxels() != voxels {
            return Err(Error::ShapeMismatch {
                expected: format!("{voxels} voxels"),
                got: format!("{} voxels in dictionary {}", dict.voxels(), dict.name()),
            });
        }
        let block = compute_projection(dict, rcond)?;
        let width = block.ncols();
        blocks.push(block);
        scale_offsets.push(offset..offset + width);
        offset += width;
    }
    Ok(ProjectionOperator { blocks, scale_offsets, voxels, total_dim: offset })
}

impl ProjectionOperator {
    /// Total reduced dimension `g = Σ g_s`.
    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    pub fn n_scales(&self) -> usize {
        self.blocks.len()
    }

    /// Index range of scale `s` in the concatenated output.
    pub fn scale_offsets(&self) -> &[Range<usize>] {
        &self.scale_offsets
    }

    pub fn block(&self, scale: usize) -> ArrayView2<'_, f64> {
        self.blocks[scale].view()
    }

    /// Materializes the full `(voxels, total_dim)` projection matrix.
    pub fn matrix(&self) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((self.voxels, self.total_dim));
        for (block, range) in self.blocks.iter().zip(&self.scale_offsets) {
            out.slice_mut(ndarray::s![.., range.clone()]).assign(block);
        }
        out
    }

    /// Projects samples (rows of `x`) to the concatenated reduced space:
    /// row `i` becomes `[W_1ᵀ x_i ; … ; W_Sᵀ x_i]`.
    pub fn project(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.voxels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", self.voxels),
                got: format!("{} columns", x.ncols()),
            });
        }
        let mut out = Array2::<f64>::zeros((x.nrows(), self.total_dim));
        for (block, range) in self.blocks.iter().zip(&self.scale_offsets) {
            let reduced = x.dot(block);
            out.slice_mut(ndarray::s![.., range.clone()]).assign(&reduced);
        }
        Ok(out)
    }

    /// Maps reduced loadings back to a voxel-space template as the average
    /// of per-scale reconstructions, `t = (1/S) Σ_s D_s y_s`. Averaging is
    /// a convention that keeps amplitudes comparable across scale counts.
    pub fn reconstruct(
        &self,
        dicts: &[Dictionary],
        loadings: ArrayView1<'_, f64>,
    ) -> Result<Array1<f64>> {
        if dicts.len() != self.blocks.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} dictionaries", self.blocks.len()),
                got: format!("{}", dicts.len()),
            });
        }
        if loadings.len() != self.total_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("loadings of length {}", self.total_dim),
                got: format!("length {}", loadings.len()),
            });
        }
        let mut template = Array1::<f64>::zeros(self.voxels);
        for (dict, range) in dicts.iter().zip(&self.scale_offsets) {
            if dict.voxels() != self.voxels || dict.n_components() != range.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("dictionary of shape ({}, {})", self.voxels, range.len()),
                    got: format!(
                        "({}, {}) for {}",
                        dict.voxels(),
                        dict.n_components(),
                        dict.name()
                    ),
                });
            }
            let scale_loadings = loadings.slice(ndarray::s![range.clone()]);
            template += &dict.components().dot(&scale_loadings);
        }
        template /= self.blocks.len() as f64;
        Ok(template)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use ndarray::array;

    fn orthonormal_dict() -> Dictionary {
        // Disjoint unit columns: DᵀD = I.
        let d = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        Dictionary::new("ortho", d).unwrap()
    }

    #[test]
    fn orthonormal_columns_project_to_themselves() {
        let dict = orthonormal_dict();
        let w = compute_projection(&dict, DEFAULT_RCOND).unwrap();
        assert!(math::max_abs(math::sub(w.view(), dict.components()).view()) < 1e-12);
    }

    #[test]
    fn hand_inverted_gram_example() {
        // D = [[1,0],[1,0],[0,1]]: Gram = diag(2, 1), so W = D diag(1/2, 1).
        let dict =
            Dictionary::new("hand", array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let w = compute_projection(&dict, DEFAULT_RCOND).unwrap();
        let expected = array![[0.5, 0.0], [0.5, 0.0], [0.0, 1.0]];
        assert!(math::max_abs(math::sub(w.view(), expected.view()).view()) < 1e-12);
    }

    #[test]
    fn duplicated_column_is_singular() {
        let dict =
            Dictionary::new("dup", array![[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]]).unwrap();
        match compute_projection(&dict, DEFAULT_RCOND) {
            Err(Error::GramSingular { .. }) => {}
            other => panic!("expected GramSingular, got {other:?}"),
        }
    }

    #[test]
    fn negative_entry_rejected() {
        let err = Dictionary::new("neg", array![[1.0, 0.0], [0.0, -0.1]]).unwrap_err();
        assert!(matches!(err, Error::InvalidDictionary(_)));
    }

    #[test]
    fn zero_column_rejected() {
        let err = Dictionary::new("zero", array![[1.0, 0.0], [1.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::InvalidDictionary(_)));
    }

    #[test]
    fn coo_sums_duplicates() {
        let dict = Dictionary::from_coo(
            "coo",
            2,
            2,
            &[(0, 0, 0.5), (0, 0, 0.5), (1, 1, 2.0)],
        )
        .unwrap();
        assert_eq!(dict.components()[(0, 0)], 1.0);
        assert_eq!(dict.components()[(1, 1)], 2.0);
    }

    #[test]
    fn left_inverse_holds_for_every_block() {
        let dicts = vec![
            Dictionary::new("a", array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 2.0]])
                .unwrap(),
            Dictionary::new("b", array![[1.0], [0.5], [0.0], [0.0]]).unwrap(),
        ];
        let op = assemble_multiscale(&dicts, DEFAULT_RCOND).unwrap();
        for (scale, dict) in dicts.iter().enumerate() {
            let product = dict.components().t().dot(&op.block(scale));
            let identity = Array2::<f64>::eye(dict.n_components());
            assert!(math::max_abs(math::sub(product.view(), identity.view()).view()) < 1e-8);
        }
    }

    #[test]
    fn multiscale_widths_sum() {
        let p = 600;
        let dicts: Vec<Dictionary> = [16usize, 64, 512]
            .iter()
            .map(|&g| {
                // Contiguous blocks of voxels, one per component.
                let mut d = Array2::<f64>::zeros((p, g));
                for j in 0..g {
                    let start = j * p / g;
                    let end = (j + 1) * p / g;
                    for i in start..end {
                        d[(i, j)] = 1.0;
                    }
                }
                Dictionary::new(format!("scale{g}"), d).unwrap()
            })
            .collect();
        let op = assemble_multiscale(&dicts, DEFAULT_RCOND).unwrap();
        assert_eq!(op.total_dim(), 592);
        assert_eq!(op.scale_offsets()[2], 80..592);
    }

    #[test]
    fn single_dictionary_matches_compute_projection() {
        let dict = orthonormal_dict();
        let op = assemble_multiscale(core::slice::from_ref(&dict), DEFAULT_RCOND).unwrap();
        let w = compute_projection(&dict, DEFAULT_RCOND).unwrap();
        assert_eq!(op.total_dim(), 2);
        assert!(math::max_abs(math::sub(op.block(0), w.view()).view()) == 0.0);
    }

    #[test]
    fn voxel_mismatch_rejected() {
        let a = Dictionary::new("a", Array2::ones((100, 1))).unwrap();
        let b = Dictionary::new("b", Array2::ones((99, 1))).unwrap();
        let err = assemble_multiscale(&[a, b], DEFAULT_RCOND).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn project_matches_naive_matmul() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        // 8 voxels, two scales of widths 2 and 3.
        let mut d1 = Array2::<f64>::zeros((8, 2));
        let mut d2 = Array2::<f64>::zeros((8, 3));
        for i in 0..8 {
            d1[(i, i / 4)] = rng.random_range(0.1..1.0);
            d2[(i, i / 3)] = rng.random_range(0.1..1.0);
        }
        let dicts = vec![
            Dictionary::new("d1", d1).unwrap(),
            Dictionary::new("d2", d2).unwrap(),
        ];
        let op = assemble_multiscale(&dicts, DEFAULT_RCOND).unwrap();
        let x = Array2::from_shape_fn((5, 8), |_| rng.random_range(-1.0..1.0));
        let projected = op.project(x.view()).unwrap();

        // Independent oracle: naive triple-loop product against the
        // materialized matrix.
        let w = op.matrix();
        for i in 0..5 {
            for j in 0..op.total_dim() {
                let mut expected = 0.0;
                for v in 0..8 {
                    expected += x[(i, v)] * w[(v, j)];
                }
                assert!((projected[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn project_zero_is_zero() {
        let dict = orthonormal_dict();
        let op = assemble_multiscale(core::slice::from_ref(&dict), DEFAULT_RCOND).unwrap();
        let x = Array2::<f64>::zeros((4, 3));
        let z = op.project(x.view()).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn loadings_recovered_in_span() {
        // x = D a with orthonormal D implies Wᵀ x = a.
        let dict = orthonormal_dict();
        let op = assemble_multiscale(core::slice::from_ref(&dict), DEFAULT_RCOND).unwrap();
        let a = array![[0.7, -1.3]];
        let x = a.dot(&dict.components().t());
        let z = op.project(x.view()).unwrap();
        assert!(math::max_abs(math::sub(z.view(), a.view()).view()) < 1e-12);
    }

    #[test]
    fn project_width_mismatch() {
        let dict = orthonormal_dict();
        let op = assemble_multiscale(core::slice::from_ref(&dict), DEFAULT_RCOND).unwrap();
        let err = op.project(Array2::<f64>::zeros((1, 4)).view()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn reconstruct_zero_and_basis_vector() {
        let dict = orthonormal_dict();
        let op = assemble_multiscale(core::slice::from_ref(&dict), DEFAULT_RCOND).unwrap();
        let zero = op.reconstruct(core::slice::from_ref(&dict), array![0.0, 0.0].view()).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let e1 = op.reconstruct(core::slice::from_ref(&dict), array![1.0, 0.0].view()).unwrap();
        let first_col = dict.components().column(0).to_owned();
        assert!(e1.iter().zip(first_col.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn two_scale_reconstruction_averages() {
        let d1 = Dictionary::new("d1", array![[1.0], [0.0], [0.0]]).unwrap();
        let d2 = Dictionary::new("d2", array![[0.0, 1.0], [2.0, 0.0], [0.0, 1.0]]).unwrap();
        let dicts = vec![d1, d2];
        let op = assemble_multiscale(&dicts, DEFAULT_RCOND).unwrap();
        let y = array![2.0, 1.0, 3.0];
        let t = op.reconstruct(&dicts, y.view()).unwrap();
        // Per-scale matvecs by hand: D1 y1 = [2,0,0]; D2 y2 = [3,2,3];
        // average = [2.5, 1, 1.5].
        assert!((t[0] - 2.5).abs() < 1e-12);
        assert!((t[1] - 1.0).abs() < 1e-12);
        assert!((t[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn single_scale_projection_idempotent_on_span() {
        // project(reconstruct(project(x))) == project(x) when S = 1.
        let dict =
            Dictionary::new("hand", array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let op = assemble_multiscale(core::slice::from_ref(&dict), DEFAULT_RCOND).unwrap();
        let x = array![[0.3, -0.7, 2.0]];
        let z = op.project(x.view()).unwrap();
        let t = op.reconstruct(core::slice::from_ref(&dict), z.row(0)).unwrap();
        let z2 = op
            .project(t.view().insert_axis(ndarray::Axis(0)))
            .unwrap();
        assert!(math::max_abs(math::sub(z2.view(), z.view()).view()) < 1e-10);
    }

    #[test]
    fn projection_is_linear() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dict =
            Dictionary::new("hand", array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let op = assemble_multiscale(core::slice::from_ref(&dict), DEFAULT_RCOND).unwrap();
        let x = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let (alpha, beta) = (1.7, -0.4);
        let mixed: Array2<f64> = alpha * &x + beta * &y;
        let combined = op.project(mixed.view()).unwrap();
        let separate = alpha * op.project(x.view()).unwrap() + beta * op.project(y.view()).unwrap();
        assert!(math::relative_frobenius_error(combined.view(), separate.view()) < 1e-10);
    }

    #[test]
    fn block_order_is_permutation_covariant() {
        let a = Dictionary::new("a", array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let b = Dictionary::new("b", array![[1.0], [1.0], [1.0]]).unwrap();
        let ab = assemble_multiscale(&[a.clone(), b.clone()], DEFAULT_RCOND).unwrap();
        let ba = assemble_multiscale(&[b, a], DEFAULT_RCOND).unwrap();
        assert_eq!(ab.scale_offsets(), &[0..2, 2..3]);
        assert_eq!(ba.scale_offsets(), &[0..1, 1..3]);
        assert!(math::max_abs(math::sub(ab.block(0), ba.block(1)).view()) == 0.0);
        assert!(math::max_abs(math::sub(ab.block(1), ba.block(0)).view()) == 0.0);
    }
}
