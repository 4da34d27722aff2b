use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autointerp::{DossierConfig, FuzzingConfig, LlmEndpointConfig, MockKind};
use crate::error::{ensure, Result};
use crate::ingestion::VOCAB_SIZE;
use crate::randomnets::{InitScheme, NetSpec, Variant};
use crate::sae::TrainConfig;
use crate::toygen::ControlMatching;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ToySweep,
    GloveSweep,
    TransformerEval,
    Autointerp,
    IllustrativeLomax,
}

/// Training data condition in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    SuperposedIn,
    GaussianIn,
    SuperposedOut,
    GaussianOut,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::SuperposedIn,
        Condition::GaussianIn,
        Condition::SuperposedOut,
        Condition::GaussianOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::SuperposedIn => "superposed-in",
            Condition::GaussianIn => "gaussian-in",
            Condition::SuperposedOut => "superposed-out",
            Condition::GaussianOut => "gaussian-out",
        }
    }
}

/// `n` points log-spaced from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

fn toy_train() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 256,
        learning_rate: 1e-3,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySweepConfig {
    pub n_sparse: usize,
    pub n_dense: usize,
    /// Defaults to `2 · n_sparse`.
    pub n_latents: Option<usize>,
    pub decay: f64,
    pub mean_active: f64,
    pub n_samples: usize,
    pub l1_coefs: Vec<f64>,
    pub conditions: Vec<Condition>,
    pub control_matching: ControlMatching,
    pub mlp_init: InitScheme,
    pub train: TrainConfig,
}

impl Default for ToySweepConfig {
    fn default() -> Self {
        Self {
            n_sparse: 512,
            n_dense: 256,
            n_latents: None,
            decay: 0.99,
            mean_active: 5.0,
            n_samples: 10_000,
            l1_coefs: log_grid(1e-3, 100.0, 11),
            conditions: Condition::ALL.to_vec(),
            control_matching: ControlMatching::PerDimension,
            mlp_init: InitScheme::KaimingNormal,
            train: toy_train(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GloveSweepConfig {
    /// GloVe text file; when absent the token-embedding matrix of
    /// `checkpoint` is used instead.
    pub path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Keep at most this many rows (file order).
    pub max_rows: Option<usize>,
    pub expansion: usize,
    pub l1_coefs: Vec<f64>,
    pub conditions: Vec<Condition>,
    pub control_matching: ControlMatching,
    pub mlp_init: InitScheme,
    pub train: TrainConfig,
}

impl Default for GloveSweepConfig {
    fn default() -> Self {
        Self {
            path: None,
            checkpoint: None,
            max_rows: None,
            expansion: 2,
            l1_coefs: log_grid(1e-3, 100.0, 11),
            conditions: Condition::ALL.to_vec(),
            control_matching: ControlMatching::PerDimension,
            mlp_init: InitScheme::KaimingNormal,
            train: toy_train(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerEvalConfig {
    pub spec: NetSpec,
    /// Parameters for the `loaded` variant and the re-randomization
    /// reference. Without it the step-0 parameters serve as reference.
    pub checkpoint: Option<PathBuf>,
    pub variants: Vec<Variant>,
    /// `.txt` or `.jsonl` corpus; a synthetic one is generated otherwise.
    pub corpus: Option<PathBuf>,
    pub corpus_bytes: usize,
    pub seq_len: usize,
    /// Tokens captured for SAE training, from the start of the corpus.
    pub train_tokens: usize,
    /// Held-out tokens for evaluation, from the end of the corpus.
    pub eval_tokens: usize,
    /// Sequences (from the held-out tokens) used for the CE loss score.
    pub ce_sequences: usize,
    pub layers: Option<Vec<usize>>,
    pub expansion: usize,
    pub k: usize,
    pub buffer_capacity: usize,
    pub train: TrainConfig,
    pub dossier: DossierConfig,
}

impl Default for TransformerEvalConfig {
    fn default() -> Self {
        Self {
            spec: NetSpec::new(4, 128, 4, VOCAB_SIZE, 128).expect("valid default spec"),
            checkpoint: None,
            variants: vec![
                Variant::Step0,
                Variant::RerandInclEmb,
                Variant::RerandExclEmb,
                Variant::Control,
            ],
            corpus: None,
            corpus_bytes: 1_000_000,
            seq_len: 128,
            train_tokens: 65_536,
            eval_tokens: 32_768,
            ce_sequences: 32,
            layers: None,
            expansion: 16,
            k: 16,
            buffer_capacity: 100_000,
            train: TrainConfig {
                epochs: 4,
                batch_size: 256,
                learning_rate: 1e-3,
                ..Default::default()
            },
            dossier: DossierConfig {
                n_latents_sampled: 100,
                windows_per_latent: 20,
                random_windows_per_latent: 0,
                window: 32,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct AutointerpConfig {
    /// Model, corpus and SAE training settings; only the first variant and
    /// the listed layers are scored.
    pub transformer: TransformerEvalConfig,
    pub endpoint: LlmEndpointConfig,
    /// Offline scorer used instead of the endpoint.
    pub mock: Option<MockKind>,
    pub dossier: DossierConfig,
    pub fuzzing: FuzzingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LomaxConfig {
    pub n_samples: usize,
    pub shape: f64,
    pub scale: f64,
    pub n_sparse: usize,
    pub n_dense: usize,
    pub noise_var: f64,
    pub mlp_init: InitScheme,
}

impl Default for LomaxConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            shape: 1.0,
            scale: 1.0,
            n_sparse: 3,
            n_dense: 2,
            noise_var: 0.0,
            mlp_init: InitScheme::KaimingNormal,
        }
    }
}

/// One experiment: its kind, every module's parameters, seeds and output
/// directory. Serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub toy: ToySweepConfig,
    pub glove: GloveSweepConfig,
    pub transformer: TransformerEvalConfig,
    pub autointerp: AutointerpConfig,
    pub lomax: LomaxConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            kind: ExperimentKind::ToySweep,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            toy: ToySweepConfig::default(),
            glove: GloveSweepConfig::default(),
            transformer: TransformerEvalConfig::default(),
            autointerp: AutointerpConfig::default(),
            lomax: LomaxConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.version == CONFIG_VERSION,
            "unsupported config version {} (expected {CONFIG_VERSION})",
            self.version
        );
        ensure!(!self.seeds.is_empty(), "at least one seed is required");
        let grid_ok = |g: &[f64]| !g.is_empty() && g.iter().all(|c| c.is_finite() && *c >= 0.0);
        match self.kind {
            ExperimentKind::ToySweep => {
                let t = &self.toy;
                ensure!(t.n_dense >= 1, "n_dense must be positive");
                ensure!(
                    t.n_sparse >= t.n_dense,
                    "n_sparse ({}) must be at least n_dense ({})",
                    t.n_sparse,
                    t.n_dense
                );
                ensure!(
                    grid_ok(&t.l1_coefs),
                    "l1_coefs must be non-empty, finite and non-negative"
                );
            }
            ExperimentKind::GloveSweep => {
                ensure!(
                    grid_ok(&self.glove.l1_coefs),
                    "l1_coefs must be non-empty, finite and non-negative"
                );
            }
            ExperimentKind::TransformerEval => self.transformer.spec.validate()?,
            ExperimentKind::Autointerp => {
                self.autointerp.transformer.spec.validate()?;
                self.autointerp.endpoint.validate()?;
            }
            ExperimentKind::IllustrativeLomax => {
                let l = &self.lomax;
                ensure!(
                    l.n_dense >= 1 && l.n_sparse >= l.n_dense,
                    "need n_sparse >= n_dense >= 1"
                );
            }
        }
        Ok(())
    }
}
