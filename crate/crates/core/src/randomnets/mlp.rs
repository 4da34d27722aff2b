use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::dataset::ActivationDataset;
use crate::error::{ensure, Result};
use crate::rng::{self, streams};

/// Two-layer ReLU network `x ↦ w2·relu(w1·x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
}

impl MlpParams {
    pub fn n_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w2.nrows()
    }

    fn check(&self) -> Result<()> {
        ensure!(
            self.b1.len() == self.hidden() && self.w2.ncols() == self.hidden() && self.b2.len() == self.n_out(),
            "inconsistent MLP parameter shapes"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    #[default]
    KaimingNormal,
}

pub const HIDDEN_MULTIPLIER: usize = 4;

/// Square MLP (`n_out = n_in`) with hidden size `4·n_in`.
pub fn init_mlp(n_in: usize, seed: u64, scheme: InitScheme) -> Result<MlpParams> {
    init_mlp_with(n_in, HIDDEN_MULTIPLIER * n_in, n_in, seed, scheme)
}

pub fn init_mlp_with(n_in: usize, hidden: usize, n_out: usize, seed: u64, scheme: InitScheme) -> Result<MlpParams> {
    ensure!(n_in >= 1 && hidden >= 1 && n_out >= 1, "MLP sizes must be positive");
    let InitScheme::KaimingNormal = scheme;
    let mut rng = rng::stream(seed, streams::MLP_INIT);
    let mut kaiming = |rows: usize, fan_in: usize| {
        let dist = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        Array2::from_shape_simple_fn((rows, fan_in), || rng.sample(dist) as f32)
    };
    let w1 = kaiming(hidden, n_in);
    let w2 = kaiming(n_out, hidden);
    Ok(MlpParams {
        w1,
        b1: Array1::zeros(hidden),
        w2,
        b2: Array1::zeros(n_out),
    })
}

/// Applies the MLP to every row; token ids and positions are kept, ground-truth
/// coefficients are not (they no longer describe the outputs).
pub fn mlp_forward(params: &MlpParams, data: &ActivationDataset) -> Result<ActivationDataset> {
    params.check()?;
    ensure!(
        data.n_dense() == params.n_in(),
        "data has {} dims, MLP expects {}",
        data.n_dense(),
        params.n_in()
    );
    let mut h = data.rows().dot(&params.w1.t());
    h += &params.b1.view().insert_axis(Axis(0));
    h.mapv_inplace(|v| v.max(0.0));
    let mut out = h.dot(&params.w2.t());
    out += &params.b2.view().insert_axis(Axis(0));
    let mut ds = ActivationDataset::new(out)?;
    if let Some(t) = data.token_ids() {
        ds = ds.with_token_ids(t.to_vec())?;
    }
    if let Some(p) = data.positions() {
        ds = ds.with_positions(p.to_vec())?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_params_give_zero_output() {
        let p = MlpParams {
            w1: Array2::zeros((8, 2)),
            b1: Array1::zeros(8),
            w2: Array2::zeros((2, 8)),
            b2: Array1::zeros(2),
        };
        let ds = ActivationDataset::new(array![[1.0, -2.0], [3.0, 4.0]]).unwrap();
        assert!(mlp_forward(&p, &ds).unwrap().rows().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_on_non_negative_inputs() {
        let p = MlpParams {
            w1: Array2::eye(3),
            b1: Array1::zeros(3),
            w2: Array2::eye(3),
            b2: Array1::zeros(3),
        };
        let x = array![[0.0f32, 1.5, 2.0], [4.0, 0.25, 9.0]];
        let ds = ActivationDataset::new(x.clone()).unwrap();
        assert_eq!(mlp_forward(&p, &ds).unwrap().rows(), x.view());
    }

    #[test]
    fn hidden_size_is_four_times_input() {
        let p = init_mlp(256, 0, InitScheme::KaimingNormal).unwrap();
        assert_eq!((p.hidden(), p.n_out()), (1024, 256));
        assert_eq!(p, init_mlp(256, 0, InitScheme::KaimingNormal).unwrap());
        assert!(p.b1.iter().chain(p.b2.iter()).all(|&b| b == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = init_mlp(4, 0, InitScheme::KaimingNormal).unwrap();
        let ds = ActivationDataset::new(Array2::zeros((2, 3))).unwrap();
        assert!(mlp_forward(&p, &ds).is_err());
    }
}
