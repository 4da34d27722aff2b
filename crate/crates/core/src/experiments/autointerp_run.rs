use serde::{Deserialize, Serialize};

use super::config::AutointerpConfig;
use super::sweep::RunFailure;
use super::transformer::{build_variant, corpus_sequences, layers_of, train_topk_on_capture, EVAL_KEY_OFFSET};
use crate::autointerp::{
    collect_dossiers, run_fuzzing, AutointerpReport, ChatBackend, DossierConfig, FuzzingConfig, HttpBackend,
    MockBackend, PromptSet, Transcript,
};
use crate::error::Result;
use crate::randomnets::Transformer;
use crate::sae::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAutointerp {
    pub label: String,
    pub variant: String,
    pub layer: usize,
    pub seed: u64,
    pub n_alive: usize,
    pub dossier_shortfall: usize,
    pub report: AutointerpReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutointerpOutcome {
    pub runs: Vec<LayerAutointerp>,
    pub failures: Vec<RunFailure>,
}

/// Trains a TopK SAE per (variant, layer) as in the transformer evaluation,
/// then explains and fuzz-scores sampled latents on the held-out corpus.
/// Every request and reply is appended to `transcript`.
pub fn run_autointerp(cfg: &AutointerpConfig, seeds: &[u64], transcript: &Transcript) -> Result<AutointerpOutcome> {
    let tcfg = &cfg.transformer;
    let prompts = PromptSet::v1();
    let backend: Box<dyn ChatBackend + '_> = match &cfg.mock {
        Some(kind) => Box::new(MockBackend::new(kind.clone(), transcript)),
        None => Box::new(HttpBackend::new(cfg.endpoint.clone(), transcript)?),
    };
    let (mut runs, mut failures) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let (train_seqs, eval_seqs) = corpus_sequences(tcfg, seed)?;
        for &variant in &tcfg.variants {
            let result = (|| -> Result<Vec<LayerAutointerp>> {
                let params = build_variant(tcfg, variant, seed)?;
                let model = Transformer::new(&tcfg.spec, &params)?;
                let layers = layers_of(tcfg);
                let train_caps = model.capture_residuals(&train_seqs, 0, &layers)?;
                let eval_caps = model.capture_residuals(&eval_seqs, EVAL_KEY_OFFSET, &layers)?;
                let train_cfg = TrainConfig {
                    seed,
                    ..tcfg.train.clone()
                };
                let mut out = Vec::new();
                for (tc, ec) in train_caps.iter().zip(&eval_caps) {
                    let sae =
                        train_topk_on_capture(&tc.data, tcfg.expansion, tcfg.k, &train_cfg, tcfg.buffer_capacity)?;
                    let set = collect_dossiers(&sae, &ec.data, &DossierConfig { seed, ..cfg.dossier })?;
                    let fuzz = FuzzingConfig { seed, ..cfg.fuzzing };
                    let report = run_fuzzing(
                        &set.dossiers,
                        backend.as_ref(),
                        &prompts,
                        &fuzz,
                        cfg.endpoint.max_concurrent,
                    )?;
                    log::info!(
                        "{variant} layer {}: pooled AUROC {:?}",
                        tc.layer,
                        report.pooled.as_ref().map(|r| r.auroc)
                    );
                    out.push(LayerAutointerp {
                        label: format!("{variant} layer {}", tc.layer),
                        variant: variant.name().to_string(),
                        layer: tc.layer,
                        seed,
                        n_alive: set.n_alive,
                        dossier_shortfall: set.shortfall,
                        report,
                    });
                }
                Ok(out)
            })();
            match result {
                Ok(r) => runs.extend(r),
                Err(e) => {
                    log::error!("{variant} (seed {seed}) failed: {e}");
                    failures.push(RunFailure {
                        run_id: format!("{variant}/seed={seed}"),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(AutointerpOutcome { runs, failures })
}
