use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation of one run, keyed by its sweep coordinates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub condition: Option<String>,
    pub variant: Option<String>,
    pub layer: Option<usize>,
    pub l1_coef: Option<f64>,
    pub k: Option<usize>,
    pub seed: u64,
    pub explained_variance: f64,
    pub cosine_sim: f64,
    pub mean_l0: f64,
    pub mean_l1: f64,
    pub mean_l1_over_sqrt_l2: f64,
    pub mean_hoyer: f64,
    pub val_mse: Option<f64>,
    pub mmcs: Option<f64>,
    pub ce_loss_score: Option<f64>,
    /// Mean next-token cross-entropies (nats) behind `ce_loss_score`.
    pub ce_orig: Option<f64>,
    pub ce_recon: Option<f64>,
    pub ce_zero: Option<f64>,
    /// Nats.
    pub token_entropy: Option<f64>,
    pub auroc: Option<f64>,
}

pub fn write_jsonl(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsReport>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![
            MetricsReport {
                run_id: "a".into(),
                l1_coef: Some(0.1),
                mmcs: Some(0.9),
                ..Default::default()
            },
            MetricsReport {
                run_id: "b".into(),
                k: Some(4),
                layer: Some(1),
                ..Default::default()
            },
        ];
        let p = dir.path().join("r.jsonl");
        write_jsonl(&p, &reports).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), reports);
        let c = dir.path().join("r.csv");
        write_csv(&c, &reports).unwrap();
        let text = std::fs::read_to_string(c).unwrap();
        assert!(text.starts_with("run_id,condition,variant,layer,l1_coef,k,seed,explained_variance"));
        assert_eq!(text.lines().count(), 3);
    }
}
