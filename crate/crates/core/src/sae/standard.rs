use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, ArrayViewMutD, Axis};

use super::{cast, orthogonal_decoder, LossAndGrads, SaeFamily, SparseAutoencoder};
use crate::error::{ensure, Result};
use crate::randomnets::Reconstructor;
use crate::real::Real;

/// ReLU encoder with bias, linear decoder without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardSae<F> {
    /// `n_latents × n_in`
    pub w_enc: Array2<F>,
    pub b_enc: Array1<F>,
    /// `n_in × n_latents`
    pub w_dec: Array2<F>,
}

/// Orthonormal decoder columns, tied encoder (`W_enc = W_decᵀ`), zero bias.
pub fn init_standard<F: Real>(n_in: usize, n_latents: usize, seed: u64) -> Result<StandardSae<F>> {
    ensure!(n_in >= 1 && n_latents >= 1, "SAE sizes must be positive");
    let dec = orthogonal_decoder(n_in, n_latents, seed);
    Ok(StandardSae {
        w_enc: cast(&dec.t().to_owned()),
        b_enc: Array1::zeros(n_latents),
        w_dec: cast(&dec),
    })
}

impl<F: Real> StandardSae<F> {
    pub fn encode_one(&self, x: ArrayView1<'_, F>) -> Result<Array1<F>> {
        ensure!(
            x.len() == self.w_enc.ncols(),
            "input has {} dims, SAE expects {}",
            x.len(),
            self.w_enc.ncols()
        );
        Ok(self.encode(x.insert_axis(Axis(0))).remove_axis(Axis(0)))
    }

    pub fn decode_one(&self, z: ArrayView1<'_, F>) -> Result<Array1<F>> {
        ensure!(
            z.len() == self.w_dec.ncols(),
            "code has {} dims, SAE has {} latents",
            z.len(),
            self.w_dec.ncols()
        );
        Ok(self.w_dec.dot(&z))
    }

    fn pre_activations(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut pre = x.dot(&self.w_enc.t());
        pre += &self.b_enc.view().insert_axis(Axis(0));
        pre
    }
}

/// `MSE(x, x̂) + l1_coef · mean_i ‖z_i‖₁` with MSE averaged over samples and
/// dimensions, and its exact gradient (subgradient 0 at the ReLU kink).
pub fn loss_standard<F: Real>(sae: &StandardSae<F>, x: ArrayView2<'_, F>, l1_coef: F) -> LossAndGrads<F> {
    let (b, n) = x.dim();
    let pre = sae.pre_activations(x);
    let z = pre.mapv(|v| if v > F::zero() { v } else { F::zero() });
    let x_hat = z.dot(&sae.w_dec.t());
    let err = &x_hat - &x;
    let denom = F::of((b * n) as f64);
    let mse = err.iter().map(|&e| e * e).sum::<F>() / denom;
    let l1 = z.sum() / F::of(b as f64);
    let loss = mse + l1_coef * l1;

    let d_xhat = err.mapv(|e| e * F::of(2.0) / denom);
    let g_dec = d_xhat.t().dot(&z);
    let mut d_pre = d_xhat.dot(&sae.w_dec);
    let l1_grad = l1_coef / F::of(b as f64);
    ndarray::Zip::from(&mut d_pre).and(&pre).for_each(|d, &p| {
        *d = if p > F::zero() { *d + l1_grad } else { F::zero() };
    });
    let g_enc = d_pre.t().dot(&x);
    let g_b = d_pre.sum_axis(Axis(0));
    LossAndGrads {
        loss,
        mse,
        grads: vec![g_enc.into_dyn(), g_b.into_dyn(), g_dec.into_dyn()],
    }
}

impl<F: Real> SparseAutoencoder<F> for StandardSae<F> {
    fn n_inputs(&self) -> usize {
        self.w_enc.ncols()
    }

    fn n_latents(&self) -> usize {
        self.w_enc.nrows()
    }

    fn encode(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        self.pre_activations(x)
            .mapv(|v| if v > F::zero() { v } else { F::zero() })
    }

    fn decode(&self, z: ArrayView2<'_, F>) -> Array2<F> {
        z.dot(&self.w_dec.t())
    }

    fn loss_and_grads(&self, x: ArrayView2<'_, F>, l1_coef: F) -> LossAndGrads<F> {
        loss_standard(self, x, l1_coef)
    }

    fn decoder(&self) -> ArrayView2<'_, F> {
        self.w_dec.view()
    }

    fn decoder_mut(&mut self) -> ArrayViewMut2<'_, F> {
        self.w_dec.view_mut()
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        vec![
            self.w_enc.view_mut().into_dyn(),
            self.b_enc.view_mut().into_dyn(),
            self.w_dec.view_mut().into_dyn(),
        ]
    }

    fn tensor_names(&self) -> &'static [&'static str] {
        &["w_enc", "b_enc", "w_dec"]
    }

    fn family(&self) -> SaeFamily {
        SaeFamily::Standard
    }
}

impl Reconstructor for StandardSae<f32> {
    fn reconstruct(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        SparseAutoencoder::reconstruct(self, x)
    }
}
