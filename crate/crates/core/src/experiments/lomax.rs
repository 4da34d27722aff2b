use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::LomaxConfig;
use crate::dataset::ActivationDataset;
use crate::error::Result;
use crate::metrics::kurtosis;
use crate::randomnets::{init_mlp, mlp_forward};
use crate::toygen::{project_batch, sample_lomax, LomaxParams, ProjectionModel};

/// One scatter panel: a named point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub name: String,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LomaxOutcome {
    pub seed: u64,
    /// Sparse inputs, dense inputs, dense outputs, sparse outputs.
    pub panels: Vec<Panel>,
    pub kurtosis_in: Vec<f64>,
    pub kurtosis_out: Vec<f64>,
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn column_kurtosis(a: &Array2<f64>) -> Vec<f64> {
    a.columns().into_iter().map(|c| kurtosis(&c.to_vec())).collect()
}

/// Lomax sparse features, projected to dense by a Gaussian matrix, passed
/// through a random ReLU MLP and mapped back with the projection's
/// pseudo-inverse.
pub fn run_lomax(cfg: &LomaxConfig, seed: u64) -> Result<LomaxOutcome> {
    let params = LomaxParams::new(cfg.shape, cfg.scale)?;
    let flat = sample_lomax(params, cfg.n_samples * cfg.n_sparse, seed)?;
    let sparse_in = Array2::from_shape_vec((cfg.n_samples, cfg.n_sparse), flat).expect("sample count matches shape");
    let proj = ProjectionModel::gaussian(cfg.n_sparse, cfg.n_dense, cfg.noise_var, seed)?;
    let dense_in = project_batch(sparse_in.view(), &proj, seed)?;
    let mlp = init_mlp(cfg.n_dense, seed, cfg.mlp_init)?;
    let dense_out = mlp_forward(&mlp, &ActivationDataset::new(dense_in.mapv(|v| v as f32))?)?
        .into_rows()
        .mapv(f64::from);
    let sparse_out = dense_out.dot(&proj.pseudo_inverse()?.t());
    Ok(LomaxOutcome {
        seed,
        kurtosis_in: column_kurtosis(&sparse_in),
        kurtosis_out: column_kurtosis(&sparse_out),
        panels: vec![
            Panel {
                name: "sparse inputs".into(),
                rows: to_rows(&sparse_in),
            },
            Panel {
                name: "dense inputs".into(),
                rows: to_rows(&dense_in),
            },
            Panel {
                name: "dense outputs".into(),
                rows: to_rows(&dense_out),
            },
            Panel {
                name: "sparse outputs".into(),
                rows: to_rows(&sparse_out),
            },
        ],
    })
}
