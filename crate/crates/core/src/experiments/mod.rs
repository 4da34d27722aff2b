//! Experiment orchestration: configuration, sweeps, per-run persistence.
//!
//! A run directory holds the resolved `config.json`, JSON-lines reports,
//! CSV summaries, plots, and `manifest.json` with a SHA-256 per file.

mod autointerp_run;
mod config;
mod lomax;
mod sweep;
mod transformer;

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub use autointerp_run::{run_autointerp, AutointerpOutcome, LayerAutointerp};
pub use config::{
    log_grid, AutointerpConfig, Condition, ExperimentConfig, ExperimentKind, GloveSweepConfig, LomaxConfig,
    ToySweepConfig, TransformerEvalConfig, CONFIG_VERSION,
};
pub use lomax::{run_lomax, LomaxOutcome, Panel};
pub use sweep::{
    frontier_for, frontiers, gap_area, run_glove_sweep, run_id, run_standard, run_toy_sweep, AveragedPoint,
    FrontierRecord, Measure, RunFailure, SweepOutcome,
};
pub use transformer::{
    build_variant, corpus_sequences, eval_variant, layers_of, reconstruction_metrics, run_transformer_eval,
    sae_token_entropy, train_topk_on_capture, TransformerOutcome, EVAL_KEY_OFFSET,
};

pub const MANIFEST: &str = "manifest.json";

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn write_json_lines<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut out = String::new();
    for v in values {
        out.push_str(&serde_json::to_string(v)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Hashes every regular file under `dir` (except the manifest itself) into
/// `manifest.json`, keyed by relative path.
pub fn write_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("walked path is under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel != MANIFEST {
                    out.insert(rel, sha256_file(&path)?);
                }
            }
        }
        Ok(())
    }
    let mut files = BTreeMap::new();
    walk(dir, dir, &mut files)?;
    write_json(&dir.join(MANIFEST), &files)?;
    Ok(files)
}
