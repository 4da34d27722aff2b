use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2};
use serde::{Deserialize, Serialize};

use super::{StandardSae, TopKSae, TrainConfig};
use crate::checkpoint::{self, TensorMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaeFamily {
    Standard,
    TopK,
}

impl SaeFamily {
    pub fn name(self) -> &'static str {
        match self {
            SaeFamily::Standard => "standard",
            SaeFamily::TopK => "top_k",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeProvenance {
    pub dataset_hash: String,
    pub seed: u64,
}

/// JSON written next to a saved SAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeSidecar {
    pub family: SaeFamily,
    pub k: Option<usize>,
    pub l1_coef: Option<f64>,
    pub config: TrainConfig,
    pub provenance: SaeProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnySae {
    Standard(StandardSae<f32>),
    TopK(TopKSae<f32>),
}

fn m2(t: &Array2<f32>) -> ArrayD<f32> {
    t.clone().into_dyn()
}

fn m1(t: &Array1<f32>) -> ArrayD<f32> {
    t.clone().into_dyn()
}

pub fn save_sae(path: &Path, sae: &AnySae, sidecar: &SaeSidecar) -> Result<()> {
    let mut t = TensorMap::new();
    match sae {
        AnySae::Standard(s) => {
            t.insert("w_enc".into(), m2(&s.w_enc));
            t.insert("b_enc".into(), m1(&s.b_enc));
            t.insert("w_dec".into(), m2(&s.w_dec));
        }
        AnySae::TopK(s) => {
            t.insert("w_enc".into(), m2(&s.w_enc));
            t.insert("b_enc".into(), m1(&s.b_enc));
            t.insert("w_dec".into(), m2(&s.w_dec));
            t.insert("b_pre".into(), m1(&s.b_pre));
        }
    }
    checkpoint::save_tensors(path, &t)?;
    fs::write(checkpoint::sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn load_sae(path: &Path) -> Result<(AnySae, SaeSidecar)> {
    let mut t = checkpoint::load_tensors(path)?;
    let sidecar: SaeSidecar = serde_json::from_str(&fs::read_to_string(checkpoint::sidecar_path(path))?)?;
    let mut take2 = |name: &str| -> Result<Array2<f32>> {
        t.remove(name)
            .ok_or_else(|| Error::InvalidArgument(format!("SAE checkpoint lacks {name}")))?
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))
    };
    let w_enc = take2("w_enc")?;
    let w_dec = take2("w_dec")?;
    let mut take1 = |name: &str| -> Result<Array1<f32>> {
        t.remove(name)
            .ok_or_else(|| Error::InvalidArgument(format!("SAE checkpoint lacks {name}")))?
            .into_dimensionality::<Ix1>()
            .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))
    };
    let b_enc = take1("b_enc")?;
    let sae = match sidecar.family {
        SaeFamily::Standard => AnySae::Standard(StandardSae { w_enc, b_enc, w_dec }),
        SaeFamily::TopK => AnySae::TopK(TopKSae {
            w_enc,
            b_enc,
            w_dec,
            b_pre: take1("b_pre")?,
            k: sidecar
                .k
                .ok_or_else(|| Error::InvalidArgument("TopK sidecar lacks k".into()))?,
        }),
    };
    Ok((sae, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::init_topk;

    #[test]
    fn topk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.slck");
        let sae = AnySae::TopK(init_topk::<f32>(4, 2, 3, 0).unwrap());
        let side = SaeSidecar {
            family: SaeFamily::TopK,
            k: Some(3),
            l1_coef: None,
            config: TrainConfig::default(),
            provenance: SaeProvenance {
                dataset_hash: "abc".into(),
                seed: 0,
            },
        };
        save_sae(&path, &sae, &side).unwrap();
        assert_eq!(load_sae(&path).unwrap(), (sae, side));
    }
}
