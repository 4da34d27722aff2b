use ndarray::{s, Axis};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::dataset::ActivationDataset;
use crate::error::{ensure, Error, Result};
use crate::rng::{self, streams};
use crate::sae::SparseAutoencoder;

/// One `window`-token excerpt with a latent's activation on every token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowExample {
    pub tokens: Vec<u32>,
    pub activations: Vec<f32>,
    /// Index of the window in the corpus.
    pub source: usize,
    pub peak: f32,
}

impl WindowExample {
    pub fn is_active(&self, i: usize) -> bool {
        self.activations[i] > 0.0
    }
}

/// A latent's maximally activating windows, plus randomly drawn windows
/// used as material for negative fuzzing items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDossier {
    pub latent: usize,
    /// Sorted by peak activation, descending.
    pub examples: Vec<WindowExample>,
    pub random_examples: Vec<WindowExample>,
    pub peak: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DossierConfig {
    pub n_latents_sampled: usize,
    pub windows_per_latent: usize,
    pub random_windows_per_latent: usize,
    pub window: usize,
    pub seed: u64,
}

impl Default for DossierConfig {
    fn default() -> Self {
        Self {
            n_latents_sampled: 100,
            windows_per_latent: 40,
            random_windows_per_latent: 40,
            window: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DossierSet {
    pub dossiers: Vec<LatentDossier>,
    pub n_alive: usize,
    /// Requested latents that could not be sampled because too few fire.
    pub shortfall: usize,
}

const ENCODE_CHUNK: usize = 4096;

/// Splits the dataset (rows in corpus order) into non-overlapping windows of
/// `config.window` tokens, samples latents uniformly among those that fire at
/// least once, and records each one's top windows by peak activation
/// (ties: earlier window first).
pub fn collect_dossiers(
    sae: &dyn SparseAutoencoder<f32>,
    data: &ActivationDataset,
    config: &DossierConfig,
) -> Result<DossierSet> {
    let tokens = data
        .token_ids()
        .ok_or_else(|| Error::InvalidArgument("dossiers need token ids".into()))?;
    ensure!(config.window >= 1, "window must be positive");
    ensure!(
        data.n_dense() == sae.n_inputs(),
        "dataset has {} dims, SAE expects {}",
        data.n_dense(),
        sae.n_inputs()
    );
    let w = config.window;
    let n_windows = data.n_samples() / w;
    ensure!(n_windows > 0, "dataset is shorter than one window");
    let n_latents = sae.n_latents();

    let mut peaks = ndarray::Array2::<f32>::zeros((n_windows, n_latents));
    let rows = data.rows();
    let per_chunk = (ENCODE_CHUNK / w).max(1);
    for start in (0..n_windows).step_by(per_chunk) {
        let end = (start + per_chunk).min(n_windows);
        let z = sae.encode(rows.slice(s![start * w..end * w, ..]));
        for (k, win) in z.axis_chunks_iter(Axis(0), w).enumerate() {
            let mut out = peaks.row_mut(start + k);
            for row in win.axis_iter(Axis(0)) {
                for (p, &v) in out.iter_mut().zip(row.iter()) {
                    if v > *p {
                        *p = v;
                    }
                }
            }
        }
    }

    let alive: Vec<usize> = (0..n_latents)
        .filter(|&j| peaks.column(j).iter().any(|&v| v > 0.0))
        .collect();
    let mut rng = rng::stream(config.seed, streams::DOSSIER_SAMPLE);
    let take = config.n_latents_sampled.min(alive.len());
    let mut sampled: Vec<usize> = index::sample(&mut rng, alive.len(), take)
        .into_iter()
        .map(|i| alive[i])
        .collect();
    sampled.sort_unstable();
    let shortfall = config.n_latents_sampled - take;
    if shortfall > 0 {
        log::warn!(
            "only {} alive latents; {shortfall} fewer dossiers than requested",
            alive.len()
        );
    }

    let example = |latent: usize, win: usize| -> WindowExample {
        let z = sae.encode(rows.slice(s![win * w..(win + 1) * w, ..]));
        let activations: Vec<f32> = z.column(latent).to_vec();
        WindowExample {
            tokens: tokens[win * w..(win + 1) * w].to_vec(),
            peak: activations.iter().copied().fold(0.0, f32::max),
            activations,
            source: win,
        }
    };

    let mut dossiers = Vec::with_capacity(sampled.len());
    for &latent in &sampled {
        let col = peaks.column(latent);
        let mut order: Vec<usize> = (0..n_windows).filter(|&i| col[i] > 0.0).collect();
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        order.truncate(config.windows_per_latent);
        let examples: Vec<WindowExample> = order.iter().map(|&i| example(latent, i)).collect();
        let mut rest: Vec<usize> = (0..n_windows).filter(|i| !order.contains(i)).collect();
        rest.shuffle(&mut rng);
        rest.truncate(config.random_windows_per_latent);
        let random_examples = rest.iter().map(|&i| example(latent, i)).collect();
        dossiers.push(LatentDossier {
            latent,
            peak: examples.first().map_or(0.0, |e| e.peak),
            examples,
            random_examples,
        });
    }
    Ok(DossierSet {
        dossiers,
        n_alive: alive.len(),
        shortfall,
    })
}
