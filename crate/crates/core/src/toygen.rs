//! Toy data exhibiting superposition: unit-norm ground-truth feature
//! directions, sparse correlated coefficients, the Lomax/projection model and
//! moment-matched Gaussian controls.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dataset::ActivationDataset;
use crate::error::{ensure, Result};
use crate::linalg;
use crate::rng::{self, streams};

/// Columns are the data-generating feature directions (`n_dense × n_sparse`).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBasis {
    features: Array2<f64>,
}

impl GroundTruthBasis {
    pub fn new(features: Array2<f64>) -> Result<Self> {
        let (n_dense, n_sparse) = features.dim();
        ensure!(n_dense >= 1 && n_sparse >= 1, "basis dimensions must be positive");
        ensure!(
            n_sparse >= n_dense,
            "n_sparse ({n_sparse}) must be at least n_dense ({n_dense})"
        );
        for (j, col) in features.axis_iter(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            ensure!((norm - 1.0).abs() <= 1e-6, "feature {j} has norm {norm}");
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn n_sparse(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_dense(&self) -> usize {
        self.features.nrows()
    }
}

/// IID directions, uniform on the unit sphere in `n_dense` dimensions.
pub fn sample_ground_truth_features(n_sparse: usize, n_dense: usize, seed: u64) -> Result<GroundTruthBasis> {
    ensure!(n_sparse >= 1 && n_dense >= 1, "dimensions must be at least 1");
    let mut rng = rng::stream(seed, streams::FEATURES);
    let mut features = Array2::<f64>::zeros((n_dense, n_sparse));
    for mut col in features.axis_iter_mut(Axis(1)) {
        loop {
            col.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 {
                col /= norm;
                break;
            }
        }
    }
    GroundTruthBasis::new(features)
}

/// Parameters of the correlated sparse coefficient generator.
#[derive(Debug, Clone)]
pub struct CoefficientModel {
    covariance: Array2<f64>,
    factor: Array2<f64>,
    decay: f64,
    mean_active: f64,
}

impl CoefficientModel {
    pub fn new(covariance: Array2<f64>, decay: f64, mean_active: f64) -> Result<Self> {
        ensure!(decay > 0.0 && decay <= 1.0, "decay must lie in (0, 1], got {decay}");
        ensure!(
            mean_active >= 0.0 && mean_active.is_finite(),
            "mean_active must be finite and non-negative, got {mean_active}"
        );
        ensure!(covariance.nrows() >= 1, "covariance must be non-empty");
        let factor = linalg::psd_factor(covariance.view())?;
        Ok(Self {
            covariance,
            factor,
            decay,
            mean_active,
        })
    }

    /// Covariance `A Aᵀ` with `A` IID standard normal.
    pub fn random(n_sparse: usize, decay: f64, mean_active: f64, seed: u64) -> Result<Self> {
        ensure!(n_sparse >= 1, "n_sparse must be at least 1");
        let mut rng = rng::stream(seed, streams::COVARIANCE);
        let a = Array2::from_shape_simple_fn((n_sparse, n_sparse), || rng.sample(StandardNormal));
        Self::new(a.dot(&a.t()), decay, mean_active)
    }

    pub fn covariance(&self) -> ArrayView2<'_, f64> {
        self.covariance.view()
    }

    /// Lower-triangular (or eigen) factor `L` with `L Lᵀ = covariance`.
    pub fn factor(&self) -> ArrayView2<'_, f64> {
        self.factor.view()
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn mean_active(&self) -> f64 {
        self.mean_active
    }

    pub fn n_sparse(&self) -> usize {
        self.covariance.nrows()
    }
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Sparse non-negative coefficients, one row per sample.
///
/// Per sample the stream is consumed as: `n` standard normals for the
/// correlated draw, `n` uniforms for the Bernoulli trials, `n` uniforms for
/// the magnitudes.
pub fn generate_coefficients(model: &CoefficientModel, n_samples: usize, seed: u64) -> Result<Array2<f64>> {
    let n = model.n_sparse();
    let mut rng = rng::stream(seed, streams::COEFFICIENTS);
    let mut out = Array2::zeros((n_samples, n));
    let mut z = Array1::<f64>::zeros(n);
    let exponents: Vec<f64> = (0..n).map(|i| model.decay * i as f64).collect();
    for mut row in out.axis_iter_mut(Axis(0)) {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let alpha = model.factor.dot(&z);
        let mut p: Vec<f64> = alpha
            .iter()
            .zip(&exponents)
            .map(|(&a, &e)| standard_normal_cdf(a).powf(e))
            .collect();
        let total: f64 = p.iter().sum();
        // p[0] == 1 always, so the total is positive.
        let scale = model.mean_active / total;
        p.iter_mut().for_each(|v| *v = (*v * scale).clamp(0.0, 1.0));
        let active: Vec<bool> = p.iter().map(|&pi| rng.random::<f64>() < pi).collect();
        for (j, slot) in row.iter_mut().enumerate() {
            let magnitude: f64 = rng.random();
            *slot = if active[j] { magnitude } else { 0.0 };
        }
    }
    Ok(out)
}

/// Toy dataset `coefficients · featuresᵀ`; the coefficients ride along for
/// later feature-recovery scoring.
pub fn generate_toy_dataset(
    basis: &GroundTruthBasis,
    model: &CoefficientModel,
    n_samples: usize,
    seed: u64,
) -> Result<ActivationDataset> {
    ensure!(
        basis.n_sparse() == model.n_sparse(),
        "basis has {} features but the coefficient model has {}",
        basis.n_sparse(),
        model.n_sparse()
    );
    let coef = generate_coefficients(model, n_samples, seed)?;
    let rows = coef.dot(&basis.features.t());
    ActivationDataset::new(rows.mapv(|v| v as f32))?.with_coefficients(coef.mapv(|v| v as f32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LomaxParams {
    pub shape: f64,
    pub scale: f64,
}

impl LomaxParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        ensure!(shape > 0.0 && shape.is_finite(), "Lomax shape must be positive");
        ensure!(scale > 0.0 && scale.is_finite(), "Lomax scale must be positive");
        Ok(Self { shape, scale })
    }

    pub fn inverse_cdf(&self, u: f64) -> f64 {
        self.scale * ((1.0 - u).powf(-1.0 / self.shape) - 1.0)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            1.0 - (1.0 + x / self.scale).powf(-self.shape)
        }
    }
}

pub fn sample_lomax(params: LomaxParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    let params = LomaxParams::new(params.shape, params.scale)?;
    let mut rng = rng::stream(seed, streams::LOMAX);
    Ok((0..n).map(|_| params.inverse_cdf(rng.random())).collect())
}

/// `x_dense ~ N(D x_sparse, Σ)`.
#[derive(Debug, Clone)]
pub struct ProjectionModel {
    proj: Array2<f64>,
    noise_cov: Array2<f64>,
    noise_factor: Array2<f64>,
}

impl ProjectionModel {
    pub fn new(proj: Array2<f64>, noise_cov: Array2<f64>) -> Result<Self> {
        let n_dense = proj.nrows();
        ensure!(n_dense >= 1 && proj.ncols() >= 1, "projection must be non-empty");
        ensure!(
            noise_cov.dim() == (n_dense, n_dense),
            "noise covariance must be {n_dense}x{n_dense}"
        );
        let noise_factor = linalg::psd_factor(noise_cov.view())?;
        Ok(Self {
            proj,
            noise_cov,
            noise_factor,
        })
    }

    /// IID standard normal `n_dense × n_sparse` projection, isotropic noise.
    pub fn gaussian(n_sparse: usize, n_dense: usize, noise_var: f64, seed: u64) -> Result<Self> {
        ensure!(noise_var >= 0.0, "noise variance must be non-negative");
        let mut rng = rng::stream(seed, streams::PROJECTION_MATRIX);
        let proj = Array2::from_shape_simple_fn((n_dense, n_sparse), || rng.sample(StandardNormal));
        Self::new(proj, Array2::eye(n_dense) * noise_var)
    }

    pub fn proj(&self) -> ArrayView2<'_, f64> {
        self.proj.view()
    }

    pub fn noise_cov(&self) -> ArrayView2<'_, f64> {
        self.noise_cov.view()
    }

    pub fn n_dense(&self) -> usize {
        self.proj.nrows()
    }

    pub fn n_sparse(&self) -> usize {
        self.proj.ncols()
    }

    pub fn pseudo_inverse(&self) -> Result<Array2<f64>> {
        linalg::pseudo_inverse_full_row_rank(self.proj.view())
    }
}

pub fn project_sparse_to_dense(
    x_sparse: ArrayView1<'_, f64>,
    model: &ProjectionModel,
    seed: u64,
) -> Result<Array1<f64>> {
    let x = x_sparse.insert_axis(Axis(0));
    Ok(project_batch(x, model, seed)?.row(0).to_owned())
}

/// Row-wise [`project_sparse_to_dense`] drawing all noise from one stream.
pub fn project_batch(x_sparse: ArrayView2<'_, f64>, model: &ProjectionModel, seed: u64) -> Result<Array2<f64>> {
    ensure!(
        x_sparse.ncols() == model.n_sparse(),
        "input has {} sparse features, projection expects {}",
        x_sparse.ncols(),
        model.n_sparse()
    );
    let mut out = x_sparse.dot(&model.proj.t());
    let mut rng = rng::stream(seed, streams::PROJECTION_NOISE);
    let mut eps = Array1::<f64>::zeros(model.n_dense());
    for mut row in out.axis_iter_mut(Axis(0)) {
        eps.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        row += &model.noise_factor.dot(&eps);
    }
    Ok(out)
}

/// Minimum-norm preimage `D⁺ x_dense`.
pub fn recover_sparse(x_dense: ArrayView1<'_, f64>, model: &ProjectionModel) -> Result<Array1<f64>> {
    ensure!(
        x_dense.len() == model.n_dense(),
        "input has {} entries, projection has {} rows",
        x_dense.len(),
        model.n_dense()
    );
    Ok(model.pseudo_inverse()?.dot(&x_dense))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMatching {
    /// One scalar mean and standard deviation over every entry.
    Global,
    /// Mean and standard deviation per input dimension.
    #[default]
    PerDimension,
}

/// IID Gaussian rows with the source data's first two moments.
pub fn gaussian_control(data: &ActivationDataset, matching: ControlMatching, seed: u64) -> Result<ActivationDataset> {
    ensure!(!data.is_empty(), "cannot build a control for an empty dataset");
    let (n, d) = (data.n_samples(), data.n_dense());
    let rows = data.rows().mapv(f64::from);
    let (mean, std): (Vec<f64>, Vec<f64>) = match matching {
        ControlMatching::PerDimension => {
            let mean = rows.mean_axis(Axis(0)).expect("non-empty");
            let std = rows.std_axis(Axis(0), 0.0);
            (mean.to_vec(), std.to_vec())
        }
        ControlMatching::Global => {
            let mean = rows.mean().expect("non-empty");
            let std = rows.std(0.0);
            (vec![mean; d], vec![std; d])
        }
    };
    let mut rng = rng::stream(seed, streams::GAUSSIAN_CONTROL);
    let out = Array2::from_shape_fn((n, d), |(_, j)| {
        let z: f64 = rng.sample(StandardNormal);
        (mean[j] + std[j] * z) as f32
    });
    ActivationDataset::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn basis_columns_are_unit_norm() {
        let b = sample_ground_truth_features(512, 256, 3).unwrap();
        assert_eq!(b.features().dim(), (256, 512));
        for col in b.features().axis_iter(Axis(1)) {
            assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn one_dimensional_basis_is_a_sign() {
        let b = sample_ground_truth_features(1, 1, 11).unwrap();
        assert_eq!(b.features()[[0, 0]].abs(), 1.0);
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(sample_ground_truth_features(0, 3, 0).is_err());
        assert!(sample_ground_truth_features(3, 0, 0).is_err());
    }

    #[test]
    fn generators_are_reproducible() {
        let a = sample_ground_truth_features(16, 8, 5).unwrap();
        let b = sample_ground_truth_features(16, 8, 5).unwrap();
        assert_eq!(a, b);
        let m = CoefficientModel::random(16, 0.99, 3.0, 5).unwrap();
        let c1 = generate_coefficients(&m, 50, 9).unwrap();
        let c2 = generate_coefficients(&m, 50, 9).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn zero_mean_active_gives_zero_coefficients() {
        let m = CoefficientModel::random(32, 0.99, 0.0, 1).unwrap();
        let c = generate_coefficients(&m, 200, 2).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let cov = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(CoefficientModel::new(cov, 0.99, 1.0).is_err());
        assert!(CoefficientModel::new(Array2::eye(2), 0.0, 1.0).is_err());
    }

    #[test]
    fn mean_active_count_matches_m() {
        let m = CoefficientModel::random(512, 0.99, 5.0, 0).unwrap();
        let c = generate_coefficients(&m, 10_000, 1).unwrap();
        let mean_nnz = c.iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
        assert!((mean_nnz - 5.0).abs() < 0.5, "mean nnz {mean_nnz}");
        assert!(c.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn toy_dataset_shape_and_linearity() {
        let basis = sample_ground_truth_features(128, 64, 0).unwrap();
        let model = CoefficientModel::random(128, 0.99, 5.0, 0).unwrap();
        let ds = generate_toy_dataset(&basis, &model, 500, 1).unwrap();
        assert_eq!((ds.n_samples(), ds.n_dense()), (500, 64));
        let coef = ds.coefficients().unwrap();
        for i in 0..ds.n_samples() {
            let norm = ds.rows().row(i).mapv(|v| f64::from(v).powi(2)).sum().sqrt();
            let bound: f64 = coef.row(i).iter().map(|&c| f64::from(c)).sum();
            assert!(norm <= bound + 1e-5);
        }
    }

    #[test]
    fn toy_dataset_dimension_mismatch() {
        let basis = sample_ground_truth_features(16, 8, 0).unwrap();
        let model = CoefficientModel::random(12, 0.99, 2.0, 0).unwrap();
        assert!(generate_toy_dataset(&basis, &model, 10, 0).is_err());
    }

    #[test]
    fn lomax_inverse_cdf_points() {
        let p = LomaxParams::new(1.0, 1.0).unwrap();
        assert_eq!(p.inverse_cdf(0.0), 0.0);
        assert!((p.inverse_cdf(0.5) - 1.0).abs() < 1e-15);
        assert!(LomaxParams::new(0.0, 1.0).is_err());
        assert!(LomaxParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn lomax_median() {
        let mut xs = sample_lomax(LomaxParams { shape: 1.0, scale: 1.0 }, 10_000, 4).unwrap();
        assert!(xs.iter().all(|&x| x >= 0.0));
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = 0.5 * (xs[4999] + xs[5000]);
        assert!((median - 1.0).abs() < 0.05, "median {median}");
        assert!(sample_lomax(LomaxParams { shape: 1.0, scale: 1.0 }, 0, 4)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn zero_noise_projection_of_basis_vector() {
        let model = ProjectionModel::gaussian(3, 2, 0.0, 7).unwrap();
        let x = project_sparse_to_dense(array![0.0, 1.0, 0.0].view(), &model, 1).unwrap();
        assert_eq!(x, model.proj().column(1).to_owned());
        assert!(project_sparse_to_dense(array![1.0, 2.0].view(), &model, 1).is_err());
    }

    #[test]
    fn recovery_for_orthonormal_rows_is_transpose() {
        let d = array![[0.6, 0.8, 0.0], [0.0, 0.0, 1.0]];
        let model = ProjectionModel::new(d.clone(), Array2::zeros((2, 2))).unwrap();
        let x = array![2.0, -3.0];
        let r = recover_sparse(x.view(), &model).unwrap();
        let expected = d.t().dot(&x);
        for (a, b) in r.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn recovery_is_a_right_inverse() {
        for seed in 0..20 {
            let model = ProjectionModel::gaussian(3, 2, 0.0, seed).unwrap();
            let mut rng = rng::stream(seed, 99);
            let x = Array1::from_shape_simple_fn(2, || rng.sample::<f64, _>(StandardNormal));
            let r = recover_sparse(x.view(), &model).unwrap();
            let back = model.proj().dot(&r);
            for (a, b) in back.iter().zip(x.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_deficient_projection_errors() {
        let d = array![[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        let model = ProjectionModel::new(d, Array2::zeros((2, 2))).unwrap();
        assert!(matches!(
            recover_sparse(array![1.0, 2.0].view(), &model),
            Err(crate::Error::SingularMatrix(_))
        ));
    }

    #[test]
    fn constant_dataset_control_is_constant() {
        let ds = ActivationDataset::new(Array2::from_elem((50, 3), 2.5f32)).unwrap();
        for matching in [ControlMatching::PerDimension, ControlMatching::Global] {
            let c = gaussian_control(&ds, matching, 0).unwrap();
            assert!(c.rows().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn empty_dataset_control_errors() {
        let ds = ActivationDataset::new(Array2::zeros((0, 3))).unwrap();
        assert!(gaussian_control(&ds, ControlMatching::default(), 0).is_err());
    }
}
