use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, ArrayViewMutD, Axis};

use super::{cast, orthogonal_decoder, LossAndGrads, SaeFamily, SparseAutoencoder};
use crate::error::{ensure, Result};
use crate::randomnets::Reconstructor;
use crate::real::Real;

/// k-sparse autoencoder with a pre-encoder bias that is added back after
/// decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKSae<F> {
    /// `n_latents × n_in`
    pub w_enc: Array2<F>,
    pub b_enc: Array1<F>,
    /// `n_in × n_latents`
    pub w_dec: Array2<F>,
    pub b_pre: Array1<F>,
    pub k: usize,
}

/// `n_latents = expansion · n_in`, initialized like the standard SAE with a
/// zero pre-encoder bias.
pub fn init_topk<F: Real>(n_in: usize, expansion: usize, k: usize, seed: u64) -> Result<TopKSae<F>> {
    let n_latents = expansion * n_in;
    ensure!(n_latents >= 1, "SAE sizes must be positive");
    ensure!(k >= 1 && k <= n_latents, "k = {k} must lie in 1..={n_latents}");
    let dec = orthogonal_decoder(n_in, n_latents, seed);
    Ok(TopKSae {
        w_enc: cast(&dec.t().to_owned()),
        b_enc: Array1::zeros(n_latents),
        w_dec: cast(&dec),
        b_pre: Array1::zeros(n_in),
        k,
    })
}

/// Indices of the `k` largest values, ordered by value (descending) with ties
/// broken by lower index.
pub fn topk_indices<F: Real>(values: ArrayView1<'_, F>, k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| -> Ordering {
        values[*b]
            .partial_cmp(&values[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let k = k.min(idx.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.truncate(k);
    idx
}

/// Per row: the surviving `(latent, value)` pairs with value > 0.
type SparseCodes<F> = Vec<Vec<(usize, F)>>;

impl<F: Real> TopKSae<F> {
    fn pre_activations(&self, x: ArrayView2<'_, F>) -> (Array2<F>, Array2<F>) {
        let centered = &x - &self.b_pre.view().insert_axis(Axis(0));
        let mut pre = centered.dot(&self.w_enc.t());
        pre += &self.b_enc.view().insert_axis(Axis(0));
        (centered, pre)
    }

    fn sparse_codes(&self, pre: &Array2<F>) -> SparseCodes<F> {
        pre.axis_iter(Axis(0))
            .map(|row| {
                topk_indices(row, self.k)
                    .into_iter()
                    .filter(|&j| row[j] > F::zero())
                    .map(|j| (j, row[j]))
                    .collect()
            })
            .collect()
    }

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
        Ok(self.w_dec.dot(&z) + &self.b_pre)
    }
}

/// Reconstruction MSE (averaged over samples and dimensions) and its gradient.
/// Only the surviving latents receive gradient; the selection itself is treated
/// as a constant.
pub fn loss_topk<F: Real>(sae: &TopKSae<F>, x: ArrayView2<'_, F>) -> LossAndGrads<F> {
    let (b, n) = x.dim();
    let n_lat = sae.w_enc.nrows();
    let (centered, pre) = sae.pre_activations(x);
    let codes = sae.sparse_codes(&pre);
    let dec_t = sae.w_dec.t().as_standard_layout().into_owned(); // n_lat × n
    let denom = F::of((b * n) as f64);
    let two_over = F::of(2.0) / denom;

    let mut g_enc = Array2::<F>::zeros((n_lat, n));
    let mut g_b_enc = Array1::<F>::zeros(n_lat);
    let mut g_dec_t = Array2::<F>::zeros((n_lat, n));
    let mut g_pre = Array1::<F>::zeros(n);
    let mut sq = F::zero();
    let mut x_hat = Array1::<F>::zeros(n);
    let mut d_centered = Array1::<F>::zeros(n);

    for (i, code) in codes.iter().enumerate() {
        x_hat.assign(&sae.b_pre);
        for &(j, zj) in code {
            x_hat.scaled_add(zj, &dec_t.row(j));
        }
        let err = &x_hat - &x.row(i);
        sq += err.iter().map(|&e| e * e).sum::<F>();
        let d_xhat = err.mapv(|e| e * two_over);
        g_pre += &d_xhat;
        d_centered.fill(F::zero());
        for &(j, zj) in code {
            g_dec_t.row_mut(j).scaled_add(zj, &d_xhat);
            let dz = dec_t.row(j).dot(&d_xhat);
            g_enc.row_mut(j).scaled_add(dz, &centered.row(i));
            g_b_enc[j] += dz;
            d_centered.scaled_add(dz, &sae.w_enc.row(j));
        }
        g_pre -= &d_centered;
    }
    let mse = sq / denom;
    LossAndGrads {
        loss: mse,
        mse,
        grads: vec![
            g_enc.into_dyn(),
            g_b_enc.into_dyn(),
            g_dec_t.reversed_axes().as_standard_layout().into_owned().into_dyn(),
            g_pre.into_dyn(),
        ],
    }
}

impl<F: Real> SparseAutoencoder<F> for TopKSae<F> {
    fn n_inputs(&self) -> usize {
        self.w_enc.ncols()
    }

    fn n_latents(&self) -> usize {
        self.w_enc.nrows()
    }

    fn encode(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let (_, pre) = self.pre_activations(x);
        let mut z = Array2::zeros(pre.raw_dim());
        for (i, code) in self.sparse_codes(&pre).into_iter().enumerate() {
            for (j, v) in code {
                z[[i, j]] = v;
            }
        }
        z
    }

    fn decode(&self, z: ArrayView2<'_, F>) -> Array2<F> {
        z.dot(&self.w_dec.t()) + self.b_pre.view().insert_axis(Axis(0))
    }

    fn loss_and_grads(&self, x: ArrayView2<'_, F>, _l1_coef: F) -> LossAndGrads<F> {
        loss_topk(self, x)
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
            self.b_pre.view_mut().into_dyn(),
        ]
    }

    fn tensor_names(&self) -> &'static [&'static str] {
        &["w_enc", "b_enc", "w_dec", "b_pre"]
    }

    fn family(&self) -> SaeFamily {
        SaeFamily::TopK
    }
}

impl Reconstructor for TopKSae<f32> {
    fn reconstruct(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        SparseAutoencoder::reconstruct(self, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_sae(n_in: usize, exp: usize, k: usize, seed: u64) -> TopKSae<f64> {
        let mut sae = init_topk::<f64>(n_in, exp, k, seed).unwrap();
        let mut r = rng::stream(seed, 1);
        sae.b_enc.mapv_inplace(|_| r.random_range(-0.5..0.5));
        sae.b_pre.mapv_inplace(|_| r.random_range(-0.5..0.5));
        sae
    }

    #[test]
    fn full_k_is_plain_relu() {
        let sae = random_sae(4, 2, 8, 3);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let z = sae.encode(x.view());
        let (_, pre) = sae.pre_activations(x.view());
        assert_eq!(z, pre.mapv(|v| v.max(0.0)));
    }

    #[test]
    fn k_one_keeps_only_the_argmax() {
        let mut sae = random_sae(4, 4, 1, 5);
        sae.b_enc.fill(10.0);
        let x = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let (_, pre) = sae.pre_activations(x.view());
        let z = sae.encode(x.view());
        for (zr, pr) in z.axis_iter(Axis(0)).zip(pre.axis_iter(Axis(0))) {
            assert_eq!(zr.iter().filter(|&&v| v != 0.0).count(), 1);
            let best = pr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let j = zr.iter().position(|&v| v != 0.0).unwrap();
            assert_eq!(pr[j], best);
        }
    }

    #[test]
    fn selection_matches_full_sort() {
        for seed in 0..50 {
            let mut r = rng::stream(seed, 2);
            let v = Array1::from_shape_simple_fn(16, || r.random_range(-1.0..1.0f64));
            let mut order: Vec<usize> = (0..16).collect();
            order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
            assert_eq!(topk_indices(v.view(), 4), order[..4].to_vec());
        }
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let v = ndarray::array![1.0, 3.0, 3.0, 3.0, 0.0];
        assert_eq!(topk_indices(v.view(), 2), vec![1, 2]);
    }

    #[test]
    fn codes_have_at_most_k_nonzeros() {
        let sae = random_sae(8, 4, 3, 9);
        let mut r = rng::stream(9, 3);
        let x = Array2::from_shape_simple_fn((40, 8), || r.random_range(-2.0..2.0f64));
        let z = sae.encode(x.view());
        assert!(z
            .axis_iter(Axis(0))
            .all(|row| row.iter().filter(|&&v| v != 0.0).count() <= 3));
        assert!(z.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn invalid_k_rejected() {
        assert!(init_topk::<f32>(4, 2, 9, 0).is_err());
        assert!(init_topk::<f32>(4, 2, 0, 0).is_err());
    }
}
