use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backend::{ChatBackend, ChatMessage, ChatRequest, RequestKind};
use super::dossier::{LatentDossier, WindowExample};
use crate::error::{ensure, Error, Result};
use crate::ingestion::ByteTokenizer;
use crate::metrics::{roc_auroc, Roc};
use crate::rng::{self, streams};

const PROMPTS_V1: &str = include_str!("../../prompts/fuzzing_v1.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delimiters {
    pub open: String,
    pub close: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictWords {
    pub yes: Vec<String>,
    pub no: Vec<String>,
}

/// Delimiters, templates and verdict vocabulary of the fuzzing protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub version: String,
    pub delimiters: Delimiters,
    pub explanation: PromptPair,
    pub fuzzing: PromptPair,
    pub verdict: VerdictWords,
}

impl PromptSet {
    pub fn v1() -> Self {
        serde_json::from_str(PROMPTS_V1).expect("bundled prompt file parses")
    }

    /// Leading yes/no word, case-insensitive; `None` when neither.
    pub fn parse_verdict(&self, reply: &str) -> Option<bool> {
        let word: String = reply
            .trim_start()
            .chars()
            .take_while(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        if self.verdict.yes.contains(&word) {
            Some(true)
        } else if self.verdict.no.contains(&word) {
            Some(false)
        } else {
            None
        }
    }

    /// Tokens joined, with each maximal run of marked positions enclosed in
    /// the delimiters.
    pub fn render(&self, tokens: &[u32], marked: &[bool]) -> String {
        let tok = ByteTokenizer;
        let mut out = String::new();
        for (i, &t) in tokens.iter().enumerate() {
            let starts = marked[i] && (i == 0 || !marked[i - 1]);
            let ends = marked[i] && (i + 1 == tokens.len() || !marked[i + 1]);
            if starts {
                out.push_str(&self.delimiters.open);
            }
            out.push_str(&tok.token_str(t));
            if ends {
                out.push_str(&self.delimiters.close);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzingItem {
    pub id: String,
    pub latent: usize,
    pub text: String,
    /// Whether the marked spans are the latent's active tokens.
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuzzingConfig {
    pub n_explanation_examples: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub seed: u64,
}

impl Default for FuzzingConfig {
    fn default() -> Self {
        Self {
            n_explanation_examples: 20,
            n_positive: 20,
            n_negative: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedItems {
    pub items: Vec<FuzzingItem>,
    pub shortfall_positive: usize,
    pub shortfall_negative: usize,
}

fn runs(marked: &[bool]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut len = 0;
    for &m in marked {
        if m {
            len += 1;
        } else if len > 0 {
            out.push(len);
            len = 0;
        }
    }
    if len > 0 {
        out.push(len);
    }
    out
}

/// Marks spans of the given lengths on inactive tokens of `ex`, separated by
/// at least one unmarked token. `None` when no placement was found.
fn place_spans<R: Rng>(ex: &WindowExample, lengths: &[usize], rng: &mut R) -> Option<Vec<bool>> {
    const TRIES: usize = 50;
    let n = ex.tokens.len();
    'attempt: for _ in 0..TRIES {
        let mut marked = vec![false; n];
        for &len in lengths {
            let starts: Vec<usize> = (0..n.saturating_sub(len - 1))
                .filter(|&s| {
                    (s..s + len).all(|i| !ex.is_active(i) && !marked[i])
                        && (s == 0 || !marked[s - 1])
                        && (s + len == n || !marked[s + len])
                })
                .collect();
            let Some(&s) = starts.as_slice().choose(rng) else {
                continue 'attempt;
            };
            marked[s..s + len].iter_mut().for_each(|m| *m = true);
        }
        return Some(marked);
    }
    None
}

/// Positive items mark exactly the active tokens of held-out top examples
/// (those after the first `n_explanation_examples`, falling back to the
/// explanation examples when too few remain). Negative items mark random
/// inactive spans in random windows, copying the span count and lengths of
/// a positive item.
pub fn render_fuzzing_items(
    dossier: &LatentDossier,
    prompts: &PromptSet,
    config: &FuzzingConfig,
) -> Result<RenderedItems> {
    let mut rng = rng::stream(config.seed, rng::derive(streams::FUZZING, dossier.latent as u64));
    let active: Vec<&WindowExample> = dossier.examples.iter().filter(|e| e.peak > 0.0).collect();
    let held_out = active.len().saturating_sub(config.n_explanation_examples);
    let pool: Vec<&WindowExample> = if held_out >= config.n_positive {
        active[config.n_explanation_examples..].to_vec()
    } else {
        active.clone()
    };
    let mut items = Vec::new();
    let mut templates = Vec::new();
    for ex in pool.iter().take(config.n_positive) {
        let marked: Vec<bool> = (0..ex.tokens.len()).map(|i| ex.is_active(i)).collect();
        templates.push(runs(&marked));
        items.push(FuzzingItem {
            id: format!("{}-pos-{}", dossier.latent, items.len()),
            latent: dossier.latent,
            text: prompts.render(&ex.tokens, &marked),
            label: true,
        });
    }
    let n_pos = items.len();
    if templates.is_empty() {
        templates.push(vec![1]);
    }
    let mut candidates: Vec<&WindowExample> = dossier.random_examples.iter().collect();
    candidates.shuffle(&mut rng);
    let mut n_neg = 0;
    let mut t = 0;
    for ex in candidates {
        if n_neg == config.n_negative {
            break;
        }
        let lengths = &templates[t % templates.len()];
        if let Some(marked) = place_spans(ex, lengths, &mut rng) {
            items.push(FuzzingItem {
                id: format!("{}-neg-{n_neg}", dossier.latent),
                latent: dossier.latent,
                text: prompts.render(&ex.tokens, &marked),
                label: false,
            });
            n_neg += 1;
            t += 1;
        }
    }
    Ok(RenderedItems {
        items,
        shortfall_positive: config.n_positive - n_pos,
        shortfall_negative: config.n_negative - n_neg,
    })
}

pub fn explanation_request(dossier: &LatentDossier, prompts: &PromptSet, n_examples: usize) -> ChatRequest {
    let examples: Vec<String> = dossier
        .examples
        .iter()
        .filter(|e| e.peak > 0.0)
        .take(n_examples)
        .enumerate()
        .map(|(i, ex)| {
            let marked: Vec<bool> = (0..ex.tokens.len()).map(|j| ex.is_active(j)).collect();
            format!("Example {}: {}", i + 1, prompts.render(&ex.tokens, &marked))
        })
        .collect();
    ChatRequest {
        id: format!("{}-explain", dossier.latent),
        kind: RequestKind::Explanation,
        messages: vec![
            ChatMessage::system(&prompts.explanation.system),
            ChatMessage::user(prompts.explanation.user.replace("{examples}", &examples.join("\n"))),
        ],
        ground_truth: None,
    }
}

pub fn fuzzing_request(item: &FuzzingItem, explanation: &str, prompts: &PromptSet) -> ChatRequest {
    ChatRequest {
        id: item.id.clone(),
        kind: RequestKind::Fuzzing,
        messages: vec![
            ChatMessage::system(&prompts.fuzzing.system),
            ChatMessage::user(
                prompts
                    .fuzzing
                    .user
                    .replace("{explanation}", explanation.trim())
                    .replace("{text}", &item.text),
            ),
        ],
        ground_truth: Some(item.label),
    }
}

/// Single completion asking for a one-sentence explanation of the latent.
pub fn generate_explanation(
    dossier: &LatentDossier,
    backend: &dyn ChatBackend,
    prompts: &PromptSet,
    n_examples: usize,
) -> Result<String> {
    let reply = backend.complete(&explanation_request(dossier, prompts, n_examples))?;
    let text = reply.trim();
    if text.is_empty() {
        return Err(Error::Endpoint("empty explanation".into()));
    }
    Ok(text.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub item_id: String,
    pub label: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzingScore {
    /// In item order.
    pub verdicts: Vec<Verdict>,
    pub n_dropped: usize,
    pub n_failed: usize,
    pub roc: Roc,
}

/// Asks one yes/no question per item, at most `max_concurrent` at a time.
/// Unparseable replies and failed requests are dropped and counted.
pub fn score_fuzzing(
    items: &[FuzzingItem],
    explanation: &str,
    backend: &dyn ChatBackend,
    prompts: &PromptSet,
    max_concurrent: usize,
) -> Result<FuzzingScore> {
    use rayon::prelude::*;
    ensure!(
        items.iter().any(|i| i.label) && items.iter().any(|i| !i.label),
        "fuzzing needs both positive and negative items"
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_concurrent.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let replies: Vec<Result<String>> = pool.install(|| {
        items
            .par_iter()
            .map(|item| backend.complete(&fuzzing_request(item, explanation, prompts)))
            .collect()
    });
    let mut verdicts = Vec::new();
    let (mut n_dropped, mut n_failed) = (0, 0);
    for (item, reply) in items.iter().zip(replies) {
        match reply {
            Ok(text) => match prompts.parse_verdict(&text) {
                Some(v) => verdicts.push(Verdict {
                    item_id: item.id.clone(),
                    label: item.label,
                    score: if v { 1.0 } else { 0.0 },
                }),
                None => n_dropped += 1,
            },
            Err(e) => {
                log::warn!("item {} failed: {e}", item.id);
                n_failed += 1;
            }
        }
    }
    let scores: Vec<f64> = verdicts.iter().map(|v| v.score).collect();
    let labels: Vec<bool> = verdicts.iter().map(|v| v.label).collect();
    let roc = roc_auroc(&scores, &labels)?;
    Ok(FuzzingScore {
        verdicts,
        n_dropped,
        n_failed,
        roc,
    })
}
