//! Evaluation quantities for trained SAEs.

mod pareto;
mod report;
mod roc;

use std::collections::HashMap;

use ndarray::{ArrayView2, Axis};

use crate::error::{ensure, Error, Result};
use crate::randomnets::{next_token_cross_entropy, Reconstructor, SubstitutionMode, Transformer};
use crate::real::Real;
use crate::toygen::GroundTruthBasis;

pub use pareto::{frontier_gap_area, interpolate_sparsity, pareto_frontier, Orientation, ParetoPoint};
pub use report::{read_jsonl, write_csv, write_jsonl, MetricsReport};
pub use roc::{roc_auroc, Roc, RocPoint};

/// Entries with magnitude above this count towards L0.
pub const L0_THRESHOLD: f64 = 1e-8;

/// Mean over ground-truth features of the best cosine similarity with any
/// learned decoder column. Zero-norm learned columns are ignored.
pub fn mmcs<F: Real>(decoder: ArrayView2<'_, F>, truth: &GroundTruthBasis) -> Result<f64> {
    ensure!(
        decoder.nrows() == truth.n_dense(),
        "decoder has {} rows, ground truth has {}",
        decoder.nrows(),
        truth.n_dense()
    );
    let learned: Vec<Vec<f64>> = decoder
        .axis_iter(Axis(1))
        .filter_map(|c| {
            let norm = c.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            (norm > 0.0).then(|| c.iter().map(|v| v.f64() / norm).collect())
        })
        .collect();
    if learned.is_empty() {
        return Err(Error::InvalidArgument("decoder has no nonzero columns".into()));
    }
    let feats = truth.features();
    let mut total = 0.0;
    for g in feats.axis_iter(Axis(1)) {
        let gn = g.dot(&g).sqrt();
        let best = learned
            .iter()
            .map(|l| l.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>() / gn)
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / feats.ncols() as f64)
}

/// `1 − Σ‖x − x̂‖² / Σ‖x − x̄‖²` with `x̄` the batch mean.
pub fn explained_variance<F: Real>(x: ArrayView2<'_, F>, x_hat: ArrayView2<'_, F>) -> Result<f64> {
    ensure!(
        x.dim() == x_hat.dim(),
        "shape mismatch: {:?} vs {:?}",
        x.dim(),
        x_hat.dim()
    );
    ensure!(x.nrows() > 0, "empty batch");
    let n = x.nrows() as f64;
    let mean: Vec<f64> = x
        .axis_iter(Axis(1))
        .map(|c| c.iter().map(|v| v.f64()).sum::<f64>() / n)
        .collect();
    let mut resid = 0.0;
    let mut total = 0.0;
    for (row, row_hat) in x.axis_iter(Axis(0)).zip(x_hat.axis_iter(Axis(0))) {
        for ((v, h), m) in row.iter().zip(row_hat.iter()).zip(&mean) {
            let (v, h) = (v.f64(), h.f64());
            resid += (v - h) * (v - h);
            total += (v - m) * (v - m);
        }
    }
    if total <= 0.0 {
        return Err(Error::Degenerate("batch has zero variance".into()));
    }
    Ok(1.0 - resid / total)
}

/// Mean over rows of `cos(x_i, x̂_i)`; rows where either vector is zero are skipped.
pub fn cosine_similarity<F: Real>(x: ArrayView2<'_, F>, x_hat: ArrayView2<'_, F>) -> Result<f64> {
    ensure!(
        x.dim() == x_hat.dim(),
        "shape mismatch: {:?} vs {:?}",
        x.dim(),
        x_hat.dim()
    );
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in x.axis_iter(Axis(0)).zip(x_hat.axis_iter(Axis(0))) {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (u, v) in a.iter().zip(b.iter()) {
            let (u, v) = (u.f64(), v.f64());
            dot += u * v;
            na += u * u;
            nb += v * v;
        }
        if na > 0.0 && nb > 0.0 {
            total += dot / (na.sqrt() * nb.sqrt());
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no row pair with nonzero norms".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityMeasures {
    pub mean_l0: f64,
    pub mean_l1: f64,
    pub mean_l1_over_sqrt_l2: f64,
    pub mean_hoyer: f64,
}

/// Mean L0 and L1 over rows.
pub fn mean_l0_l1<F: Real>(z: ArrayView2<'_, F>) -> (f64, f64) {
    if z.nrows() == 0 {
        return (0.0, 0.0);
    }
    let (mut l0, mut l1) = (0usize, 0.0);
    for v in z.iter() {
        let a = v.f64().abs();
        if a > L0_THRESHOLD {
            l0 += 1;
        }
        l1 += a;
    }
    let n = z.nrows() as f64;
    (l0 as f64 / n, l1 / n)
}

/// Hoyer sparseness of one vector: `(√n − ‖z‖₁/‖z‖₂)/(√n − 1)`.
pub fn hoyer(z: &[f64]) -> Result<f64> {
    ensure!(z.len() >= 2, "Hoyer sparseness needs at least two entries");
    let l1: f64 = z.iter().map(|v| v.abs()).sum();
    let l2 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return Err(Error::Degenerate("zero vector".into()));
    }
    let sqrt_n = (z.len() as f64).sqrt();
    Ok(((sqrt_n - l1 / l2) / (sqrt_n - 1.0)).clamp(0.0, 1.0))
}

/// Per-row L0, L1, `‖z‖₁/√‖z‖₂` and Hoyer sparseness, averaged over rows.
/// All-zero rows count towards L0 and L1 but are left out of the last two.
pub fn sparsity_measures<F: Real>(z: ArrayView2<'_, F>) -> Result<SparsityMeasures> {
    ensure!(z.ncols() >= 2, "Hoyer sparseness needs at least two latents");
    let (mean_l0, mean_l1) = mean_l0_l1(z);
    let (mut ratio, mut hoy, mut nonzero) = (0.0, 0.0, 0usize);
    let mut row_buf = vec![0.0; z.ncols()];
    for row in z.axis_iter(Axis(0)) {
        for (dst, v) in row_buf.iter_mut().zip(row.iter()) {
            *dst = v.f64();
        }
        let l2 = row_buf.iter().map(|v| v * v).sum::<f64>().sqrt();
        if l2 == 0.0 {
            continue;
        }
        let l1: f64 = row_buf.iter().map(|v| v.abs()).sum();
        ratio += l1 / l2.sqrt();
        hoy += hoyer(&row_buf)?;
        nonzero += 1;
    }
    let denom = nonzero.max(1) as f64;
    Ok(SparsityMeasures {
        mean_l0,
        mean_l1,
        mean_l1_over_sqrt_l2: ratio / denom,
        mean_hoyer: hoy / denom,
    })
}

/// `(CE_recon − CE_orig) / (CE_zero − CE_orig)`.
pub fn ce_loss_score_from(ce_orig: f64, ce_recon: f64, ce_zero: f64) -> Result<f64> {
    if !(ce_zero > ce_orig) {
        return Err(Error::Degenerate(format!(
            "zero-ablation CE {ce_zero} does not exceed original CE {ce_orig}"
        )));
    }
    Ok((ce_recon - ce_orig) / (ce_zero - ce_orig))
}

/// Mean next-token cross-entropies under the three passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeLosses {
    pub orig: f64,
    pub recon: f64,
    pub zero: f64,
}

impl CeLosses {
    pub fn score(&self) -> Result<f64> {
        ce_loss_score_from(self.orig, self.recon, self.zero)
    }
}

/// Runs the unmodified, reconstruction-substituted and zero-ablated passes
/// over `sequences`, substituting the residual stream after `layer`.
pub fn ce_losses(
    model: &Transformer<'_>,
    reconstructor: &dyn Reconstructor,
    layer: usize,
    sequences: &[Vec<u32>],
    first_seq_key: u64,
) -> Result<CeLosses> {
    use rayon::prelude::*;
    ensure!(!sequences.is_empty(), "corpus is empty");
    let per_seq: Vec<[(f64, usize); 3]> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let key = first_seq_key + i as u64;
            let orig = model.forward(seq, key, &Default::default())?.logits;
            let recon = model.substitute_residual(seq, key, layer, SubstitutionMode::Reconstruction(reconstructor))?;
            let zero = model.substitute_residual(seq, key, layer, SubstitutionMode::Zero)?;
            Ok([
                next_token_cross_entropy(orig.view(), seq),
                next_token_cross_entropy(recon.view(), seq),
                next_token_cross_entropy(zero.view(), seq),
            ])
        })
        .collect::<Result<_>>()?;
    let mut sums = [0.0; 3];
    let mut count = 0;
    for r in &per_seq {
        for (s, (v, _)) in sums.iter_mut().zip(r) {
            *s += v;
        }
        count += r[0].1;
    }
    ensure!(count > 0, "sequences are too short to predict any token");
    let c = count as f64;
    Ok(CeLosses {
        orig: sums[0] / c,
        recon: sums[1] / c,
        zero: sums[2] / c,
    })
}

/// Reconstruction-substitution CE loss score of `reconstructor` at `layer`.
pub fn ce_loss_score(
    model: &Transformer<'_>,
    reconstructor: &dyn Reconstructor,
    layer: usize,
    sequences: &[Vec<u32>],
    first_seq_key: u64,
) -> Result<f64> {
    ce_losses(model, reconstructor, layer, sequences, first_seq_key)?.score()
}

/// Entropy (nats) of one latent's activation mass over token ids, or `None`
/// when the total activation is zero.
pub fn latent_token_entropy(tokens: &[u32], activations: &[f64]) -> Result<Option<f64>> {
    ensure!(
        tokens.len() == activations.len(),
        "{} tokens but {} activations",
        tokens.len(),
        activations.len()
    );
    ensure!(
        activations.iter().all(|a| a.is_finite() && *a >= 0.0),
        "activations must be finite and non-negative"
    );
    let mut mass: HashMap<u32, f64> = HashMap::new();
    let mut total = 0.0;
    for (&t, &a) in tokens.iter().zip(activations) {
        *mass.entry(t).or_default() += a;
        total += a;
    }
    if total <= 0.0 {
        return Ok(None);
    }
    let mut masses: Vec<(u32, f64)> = mass.into_iter().collect();
    masses.sort_unstable_by_key(|&(t, _)| t);
    let h = masses
        .iter()
        .filter(|(_, m)| *m > 0.0)
        .map(|(_, m)| {
            let p = m / total;
            -p * p.ln()
        })
        .sum();
    Ok(Some(h))
}

/// Mean token entropy over latents, each given as `(token ids, activations)`
/// over its example set. Latents with zero total activation are skipped.
pub fn token_entropy<'a, I>(latents: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [u32], &'a [f64])>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (tokens, acts) in latents {
        if let Some(h) = latent_token_entropy(tokens, acts)? {
            total += h;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("every latent has zero total activation".into()));
    }
    Ok(total / count as f64)
}

/// Sample mean and its standard error (`s / √n`, zero for one value).
pub fn mean_and_standard_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Sample excess-free kurtosis `m4 / m2²` (3 for a Gaussian).
pub fn kurtosis(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn ev_anchors() {
        let x = array![[1.0, 2.0], [3.0, 5.0], [0.0, -1.0]];
        assert_eq!(explained_variance(x.view(), x.view()).unwrap(), 1.0);
        let mean = x.mean_axis(Axis(0)).unwrap();
        let xbar = Array2::from_shape_fn(x.dim(), |(_, j)| mean[j]);
        assert!(explained_variance(x.view(), xbar.view()).unwrap().abs() < 1e-12);
        let c = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(matches!(
            explained_variance(c.view(), c.view()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn sparsity_anchors() {
        let mut one_hot = Array2::<f64>::zeros((1, 16));
        one_hot[[0, 3]] = 2.5;
        let s = sparsity_measures(one_hot.view()).unwrap();
        assert_eq!(s.mean_l0, 1.0);
        assert!((s.mean_hoyer - 1.0).abs() < 1e-15);

        let c = 0.7;
        let constant = Array2::<f64>::from_elem((1, 16), c);
        let s = sparsity_measures(constant.view()).unwrap();
        assert!(s.mean_hoyer.abs() < 1e-15);
        assert!((s.mean_l1_over_sqrt_l2 - 16.0 * c / (4.0 * c).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_are_left_out_of_ratio_measures() {
        let z = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let s = sparsity_measures(z.view()).unwrap();
        assert_eq!(s.mean_l0, 0.5);
        assert_eq!(s.mean_hoyer, 1.0);
        assert_eq!(s.mean_l1_over_sqrt_l2, 1.0);
    }

    #[test]
    fn hoyer_needs_two_entries() {
        assert!(sparsity_measures(Array2::<f64>::ones((3, 1)).view()).is_err());
    }

    #[test]
    fn ce_score_anchors() {
        assert_eq!(ce_loss_score_from(2.0, 2.0, 5.0).unwrap(), 0.0);
        assert_eq!(ce_loss_score_from(2.0, 5.0, 5.0).unwrap(), 1.0);
        assert!(matches!(ce_loss_score_from(5.0, 4.0, 5.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn entropy_anchors() {
        let one = token_entropy([(&[7u32, 7, 7][..], &[1.0, 0.5, 2.0][..])]).unwrap();
        assert_eq!(one, 0.0);
        let toks: Vec<u32> = (0..5).collect();
        let acts = [1.0; 5];
        let h = token_entropy([(&toks[..], &acts[..])]).unwrap();
        assert!((h - 5f64.ln()).abs() < 1e-12);
        assert!(token_entropy([(&toks[..], &[0.0; 5][..])]).is_err());
    }

    #[test]
    fn standard_error_matches_definition() {
        let (m, se) = mean_and_standard_error(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_kurtosis_is_three() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = crate::rng::stream(1, 0);
        let v: Vec<f64> = (0..200_000).map(|_| rng.sample(StandardNormal)).collect();
        assert!((kurtosis(&v) - 3.0).abs() < 0.1);
    }
}
