use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use sparselab::rng::{self, streams};
use sparselab::toygen::{
    gaussian_control, generate_coefficients, project_batch, sample_ground_truth_features, CoefficientModel,
    ControlMatching, LomaxParams, ProjectionModel,
};
use sparselab::ActivationDataset;
use statrs::distribution::{ContinuousCDF, Normal};

fn mean_abs_cos(cols: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            let d: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            out.push(d.abs());
        }
    }
    out
}

fn random_unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

#[test]
fn pairwise_cosines_match_monte_carlo_reference() {
    let mut rng = rng::stream(99, 1);
    let (mut sum, mut sq) = (0.0, 0.0);
    let n_pairs = 1_000_000;
    for _ in 0..n_pairs {
        let (a, b) = (random_unit(&mut rng, 32), random_unit(&mut rng, 32));
        let c = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>().abs();
        sum += c;
        sq += c * c;
    }
    let reference = sum / n_pairs as f64;
    let sd = (sq / n_pairs as f64 - reference * reference).sqrt();

    let mut observed = Vec::new();
    for seed in 0..5 {
        let basis = sample_ground_truth_features(64, 32, seed).unwrap();
        let cols: Vec<Vec<f64>> = basis.features().axis_iter(Axis(1)).map(|c| c.to_vec()).collect();
        observed.extend(mean_abs_cos(&cols));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let se = sd / (observed.len() as f64).sqrt();
    assert!(
        (mean - reference).abs() < 4.0 * se,
        "mean |cos| {mean} vs reference {reference} (se {se})"
    );
}

/// Straight-line transcription of the coefficient sampler on the same stream.
fn reference_coefficients(cov_factor: &Array2<f64>, decay: f64, m: f64, n_samples: usize, seed: u64) -> Array2<f64> {
    let n = cov_factor.nrows();
    let phi = Normal::new(0.0, 1.0).unwrap();
    let mut rng = rng::stream(seed, streams::COEFFICIENTS);
    let mut out = Array2::zeros((n_samples, n));
    for s in 0..n_samples {
        let mut z = vec![0.0; n];
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mut p = vec![0.0; n];
        for i in 0..n {
            let mut alpha = 0.0;
            for j in 0..n {
                alpha += cov_factor[[i, j]] * z[j];
            }
            p[i] = phi.cdf(alpha).powf(decay * i as f64);
        }
        let total: f64 = p.iter().sum();
        for v in p.iter_mut() {
            *v = (*v * m / total).min(1.0);
        }
        let mut active = vec![false; n];
        for i in 0..n {
            active[i] = rng.random::<f64>() < p[i];
        }
        for i in 0..n {
            let u: f64 = rng.random();
            if active[i] {
                out[[s, i]] = u;
            }
        }
    }
    out
}

#[test]
fn coefficients_match_reference_transcription() {
    let model = CoefficientModel::random(8, 1.0, 2.0, 3).unwrap();
    let got = generate_coefficients(&model, 500, 3).unwrap();
    let want = reference_coefficients(&model.factor().to_owned(), 1.0, 2.0, 500, 3);
    for (g, w) in got.iter().zip(want.iter()) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
    assert!(got.iter().any(|&v| v > 0.0));
}

#[test]
fn factor_reproduces_covariance() {
    let model = CoefficientModel::random(16, 0.99, 5.0, 8).unwrap();
    let l = model.factor();
    let back = l.dot(&l.t());
    let scale = model.covariance().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    for (a, b) in back.iter().zip(model.covariance().iter()) {
        assert!((a - b).abs() < 1e-9 * scale);
    }
}

#[test]
fn row_norms_obey_triangle_inequality() {
    let basis = sample_ground_truth_features(40, 20, 1).unwrap();
    let model = CoefficientModel::random(40, 0.99, 5.0, 1).unwrap();
    let data = sparselab::toygen::generate_toy_dataset(&basis, &model, 300, 1).unwrap();
    let coef = data.coefficients().unwrap();
    for (row, c) in data.rows().outer_iter().zip(coef.outer_iter()) {
        let norm = row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        let l1: f64 = c.iter().map(|&v| f64::from(v)).sum();
        assert!(norm <= l1 + 1e-4);
    }
}

#[test]
fn lomax_inverse_cdf_matches_numeric_inversion() {
    let p = LomaxParams::new(1.0, 1.0).unwrap();
    assert_eq!(p.inverse_cdf(0.0), 0.0);
    for &u in &[0.1, 0.25, 0.5, 0.9, 0.99] {
        let (mut lo, mut hi) = (0.0f64, 1e6f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if p.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((p.inverse_cdf(u) - lo).abs() < 1e-8 * lo.max(1.0));
    }
    assert!((p.inverse_cdf(0.5) - 1.0).abs() < 1e-12);
}

#[test]
fn isotropic_noise_covariance_within_sampling_error() {
    let sigma2 = 0.7;
    let model = ProjectionModel::gaussian(5, 3, sigma2, 4).unwrap();
    let n = 100_000;
    let x = Array2::<f64>::zeros((n, 5));
    let y = project_batch(x.view(), &model, 4).unwrap();
    let mean = y.mean_axis(Axis(0)).unwrap();
    let c = &y - &mean.insert_axis(Axis(0));
    for i in 0..3 {
        for j in 0..3 {
            let prod: Array1<f64> = &c.column(i) * &c.column(j);
            let cov = prod.mean().unwrap();
            let se = prod.std(1.0) / (n as f64).sqrt();
            let want = if i == j { sigma2 } else { 0.0 };
            assert!(
                (cov - want).abs() < 3.5 * se,
                "cov[{i},{j}] = {cov}, want {want} (se {se})"
            );
        }
    }
}

fn moments(rows: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    (rows.mean_axis(Axis(0)).unwrap(), rows.std_axis(Axis(0), 0.0))
}

#[test]
fn control_moments_match_source() {
    let basis = sample_ground_truth_features(32, 16, 2).unwrap();
    let model = CoefficientModel::random(32, 0.99, 5.0, 2).unwrap();
    let data = sparselab::toygen::generate_toy_dataset(&basis, &model, 10_000, 2).unwrap();
    let control = gaussian_control(&data, ControlMatching::PerDimension, 2).unwrap();
    let src = data.rows().mapv(f64::from);
    let ctl = control.rows().mapv(f64::from);
    let (m0, s0) = moments(&src);
    let (m1, s1) = moments(&ctl);
    let n = 10_000f64;
    for d in 0..16 {
        let se_mean = s0[d] / n.sqrt();
        let se_std = s0[d] / (2.0 * n).sqrt();
        assert!((m0[d] - m1[d]).abs() < 3.5 * se_mean, "dim {d} mean");
        assert!((s0[d] - s1[d]).abs() < 3.5 * se_std, "dim {d} std");
    }

    let again = gaussian_control(&control, ControlMatching::PerDimension, 3).unwrap();
    let (m2, s2) = moments(&again.rows().mapv(f64::from));
    for d in 0..16 {
        assert!((m2[d] - m1[d]).abs() < 3.5 * s1[d] / n.sqrt());
        assert!((s2[d] - s1[d]).abs() < 3.5 * s1[d] / (2.0 * n).sqrt());
    }
}

#[test]
fn global_control_shares_one_scale() {
    let rows = Array2::from_shape_fn((2000, 3), |(i, j)| (i % 7) as f32 * (j + 1) as f32);
    let data = ActivationDataset::new(rows).unwrap();
    let c = gaussian_control(&data, ControlMatching::Global, 0).unwrap();
    let (m, _) = moments(&c.rows().mapv(f64::from));
    let spread = m.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - m.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    assert!(
        spread < 1.0,
        "per-dimension means should agree under global matching: {m}"
    );
}
