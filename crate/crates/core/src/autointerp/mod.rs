//! Fuzzing-based auto-interpretability: max-activating dossiers, LLM
//! explanations, and yes/no judgments on delimited excerpts scored by AUROC.

mod backend;
mod dossier;
mod fuzzing;

pub use backend::{
    marked_spans, ChatBackend, ChatMessage, ChatRequest, HttpBackend, LlmEndpointConfig, MockBackend, MockKind,
    RequestKind, Transcript,
};
pub use dossier::{collect_dossiers, DossierConfig, DossierSet, LatentDossier, WindowExample};
pub use fuzzing::{
    explanation_request, fuzzing_request, generate_explanation, render_fuzzing_items, score_fuzzing, FuzzingConfig,
    FuzzingItem, FuzzingScore, PromptSet, RenderedItems, Verdict,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{roc_auroc, Roc};

/// Outcome for one latent. `error` is set when the latent failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentScore {
    pub latent: usize,
    pub explanation: Option<String>,
    pub auroc: Option<f64>,
    pub n_items: usize,
    pub n_dropped: usize,
    pub n_failed: usize,
    pub verdicts: Vec<Verdict>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutointerpReport {
    pub model: String,
    pub temperature: f64,
    pub prompt_version: String,
    pub latents: Vec<LatentScore>,
    pub n_failed_latents: usize,
    /// Over the verdicts of every scored latent; `None` if a class is missing.
    pub pooled: Option<Roc>,
}

/// Explanation then fuzzing for every dossier. Failures are confined to the
/// latent they happen in.
pub fn run_fuzzing(
    dossiers: &[LatentDossier],
    backend: &dyn ChatBackend,
    prompts: &PromptSet,
    config: &FuzzingConfig,
    max_concurrent: usize,
) -> Result<AutointerpReport> {
    let mut latents = Vec::with_capacity(dossiers.len());
    for d in dossiers {
        let mut score = LatentScore {
            latent: d.latent,
            explanation: None,
            auroc: None,
            n_items: 0,
            n_dropped: 0,
            n_failed: 0,
            verdicts: Vec::new(),
            error: None,
        };
        let outcome = (|| -> Result<()> {
            let explanation = generate_explanation(d, backend, prompts, config.n_explanation_examples)?;
            score.explanation = Some(explanation.clone());
            let rendered = render_fuzzing_items(d, prompts, config)?;
            score.n_items = rendered.items.len();
            let fz = score_fuzzing(&rendered.items, &explanation, backend, prompts, max_concurrent)?;
            score.auroc = Some(fz.roc.auroc);
            score.n_dropped = fz.n_dropped;
            score.n_failed = fz.n_failed;
            score.verdicts = fz.verdicts;
            Ok(())
        })();
        if let Err(e) = outcome {
            log::warn!("latent {} failed: {e}", d.latent);
            score.error = Some(e.to_string());
        }
        latents.push(score);
    }
    let all: Vec<&Verdict> = latents.iter().flat_map(|l| &l.verdicts).collect();
    let scores: Vec<f64> = all.iter().map(|v| v.score).collect();
    let labels: Vec<bool> = all.iter().map(|v| v.label).collect();
    Ok(AutointerpReport {
        model: backend.model(),
        temperature: backend.temperature(),
        prompt_version: prompts.version.clone(),
        n_failed_latents: latents.iter().filter(|l| l.error.is_some()).count(),
        pooled: roc_auroc(&scores, &labels).ok(),
        latents,
    })
}
