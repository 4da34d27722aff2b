//! Sparse autoencoders with closed-form gradients.
//!
//! Two families share one training loop:
//! * [`StandardSae`]: `z = relu(W_enc x + b_enc)`, `x̂ = W_dec z`, trained on
//!   MSE plus an L1 penalty on `z`.
//! * [`TopKSae`]: pre-activations `W_enc (x − b_pre) + b_enc`, only the `k`
//!   largest survive (then ReLU), `x̂ = W_dec z + b_pre`, trained on MSE.
//!
//! Batches are matrices with one sample per row.

mod io;
mod standard;
mod topk;
mod train;

use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, ArrayViewMutD, Axis};

use crate::real::Real;

pub use io::{load_sae, save_sae, AnySae, SaeFamily, SaeProvenance, SaeSidecar};
pub use standard::{init_standard, loss_standard, StandardSae};
pub use topk::{init_topk, loss_topk, topk_indices, TopKSae};
pub use train::{evaluate, split_indices, train, EpochMetrics, OptimizerConfig, TrainConfig, TrainReport, Trainer};

/// Loss value and gradients in the order of [`SparseAutoencoder::tensors_mut`].
#[derive(Debug, Clone)]
pub struct LossAndGrads<F> {
    pub loss: F,
    pub mse: F,
    pub grads: Vec<ArrayD<F>>,
}

/// Behaviour shared by both SAE families.
pub trait SparseAutoencoder<F: Real> {
    fn n_inputs(&self) -> usize;
    fn n_latents(&self) -> usize;
    /// Latent codes for a batch.
    fn encode(&self, x: ArrayView2<'_, F>) -> Array2<F>;
    /// Reconstructions from latent codes.
    fn decode(&self, z: ArrayView2<'_, F>) -> Array2<F>;
    /// Training objective on a batch. `l1_coef` is ignored by TopK.
    fn loss_and_grads(&self, x: ArrayView2<'_, F>, l1_coef: F) -> LossAndGrads<F>;
    /// `n_inputs × n_latents`; columns are the learned feature directions.
    fn decoder(&self) -> ArrayView2<'_, F>;
    fn decoder_mut(&mut self) -> ArrayViewMut2<'_, F>;
    /// Parameter tensors in a fixed order.
    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>>;
    fn tensor_names(&self) -> &'static [&'static str];
    fn family(&self) -> SaeFamily;

    fn reconstruct(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        self.decode(self.encode(x).view())
    }
}

/// Rescales every non-zero decoder column to unit L2 norm.
pub fn normalize_columns<F: Real>(mut w: ArrayViewMut2<'_, F>) {
    for mut col in w.axis_iter_mut(Axis(1)) {
        let norm = col.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if norm > 0.0 {
            let inv = F::of(1.0 / norm);
            col.mapv_inplace(|v| v * inv);
        }
    }
}

/// Largest `|‖column‖ − 1|` over decoder columns.
pub fn max_column_norm_error<F: Real>(w: ArrayView2<'_, F>) -> f64 {
    w.axis_iter(Axis(1))
        .map(|c| (c.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Orthonormal-column decoder: Gaussian blocks of up to `n_in` columns, each
/// orthonormalized by QR, then every column normalized.
pub(crate) fn orthogonal_decoder(n_in: usize, n_latents: usize, seed: u64) -> Array2<f64> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = crate::rng::stream(seed, crate::rng::streams::SAE_INIT);
    let mut w = Array2::<f64>::zeros((n_in, n_latents));
    let mut start = 0;
    while start < n_latents {
        let width = n_in.min(n_latents - start);
        let g = Array2::from_shape_simple_fn((n_in, width), || rng.sample::<f64, _>(StandardNormal));
        let q = crate::linalg::orthonormal_columns(g.view());
        w.slice_mut(ndarray::s![.., start..start + width]).assign(&q);
        start += width;
    }
    normalize_columns(w.view_mut());
    w
}

fn cast<F: Real>(a: &Array2<f64>) -> Array2<F> {
    a.mapv(F::of)
}
