use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::config::TransformerEvalConfig;
use super::sweep::RunFailure;
use crate::autointerp::{collect_dossiers, DossierConfig};
use crate::dataset::ActivationDataset;
use crate::error::{ensure, Error, Result};
use crate::ingestion::{load_corpus, synthetic_corpus, tokenize, ActivationBuffer, BufferConfig};
use crate::metrics::{
    ce_losses, cosine_similarity, explained_variance, hoyer, token_entropy, MetricsReport, L0_THRESHOLD,
};
use crate::randomnets::{init_step0, rerandomize, NetParams, Transformer, Variant};
use crate::rng;
use crate::sae::{init_topk, SparseAutoencoder, TopKSae, TrainConfig, Trainer};

/// Sequence keys of held-out sequences start here, so control-variant noise
/// never repeats between training and evaluation.
pub const EVAL_KEY_OFFSET: u64 = 1 << 32;

const CHUNK_ROWS: usize = 4096;

/// Training and held-out sequences: the first `train_tokens` and the last
/// `eval_tokens` of the tokenized corpus, in whole sequences.
pub fn corpus_sequences(cfg: &TransformerEvalConfig, seed: u64) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    ensure!(cfg.seq_len >= 2, "seq_len must be at least 2");
    ensure!(
        cfg.seq_len <= cfg.spec.context_length,
        "seq_len {} exceeds the context length {}",
        cfg.seq_len,
        cfg.spec.context_length
    );
    let docs = match &cfg.corpus {
        Some(p) => load_corpus(p)?,
        None => synthetic_corpus(cfg.corpus_bytes, seed),
    };
    let stream = tokenize(&docs);
    ensure!(
        stream.ids.iter().all(|&t| (t as usize) < cfg.spec.vocab_size),
        "corpus tokens exceed the model vocabulary"
    );
    let mut seqs: Vec<Vec<u32>> = stream
        .sequences(cfg.seq_len)
        .into_iter()
        .filter(|s| s.len() == cfg.seq_len)
        .collect();
    let n_train = cfg.train_tokens.div_ceil(cfg.seq_len);
    let n_eval = cfg.eval_tokens.div_ceil(cfg.seq_len);
    ensure!(
        n_train + n_eval <= seqs.len(),
        "corpus has {} sequences; {n_train} training and {n_eval} held-out requested",
        seqs.len()
    );
    let eval = seqs.split_off(seqs.len() - n_eval);
    seqs.truncate(n_train);
    Ok((seqs, eval))
}

/// Parameters of one variant. The re-randomization reference is the loaded
/// checkpoint when configured, else the step-0 parameters.
pub fn build_variant(cfg: &TransformerEvalConfig, variant: Variant, seed: u64) -> Result<NetParams> {
    let loaded = match &cfg.checkpoint {
        Some(p) => Some(NetParams::load(p, Some(&cfg.spec))?.1),
        None => None,
    };
    let reference = || -> Result<NetParams> {
        match &loaded {
            Some(p) => Ok(p.clone()),
            None => init_step0(&cfg.spec, seed),
        }
    };
    Ok(match variant {
        Variant::Loaded => loaded
            .clone()
            .ok_or_else(|| Error::InvalidArgument("the loaded variant needs a checkpoint".into()))?,
        Variant::Step0 => init_step0(&cfg.spec, seed)?,
        Variant::RerandInclEmb => rerandomize(&reference()?, true, seed),
        Variant::RerandExclEmb => rerandomize(&reference()?, false, seed),
        Variant::Control => reference()?.into_control(seed),
    })
}

fn row_chunks(data: &ActivationDataset) -> impl Iterator<Item = Result<ActivationDataset>> + '_ {
    let n = data.n_samples();
    (0..n.div_ceil(CHUNK_ROWS)).map(move |c| {
        let idx: Vec<usize> = (c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(n)).collect();
        Ok(data.select(&idx))
    })
}

/// TopK SAE trained on captured activations fed through a shuffling
/// activation buffer, one buffer pass per epoch.
pub fn train_topk_on_capture(
    data: &ActivationDataset,
    expansion: usize,
    k: usize,
    train_cfg: &TrainConfig,
    buffer_capacity: usize,
) -> Result<TopKSae<f32>> {
    let sae = init_topk::<f32>(data.n_dense(), expansion, k, train_cfg.seed)?;
    let mut trainer = Trainer::new(sae, train_cfg);
    for epoch in 0..train_cfg.epochs {
        let buffer = ActivationBuffer::new(
            row_chunks(data),
            BufferConfig {
                capacity: buffer_capacity.max(train_cfg.batch_size),
                batch_size: train_cfg.batch_size,
                seed: rng::derive(train_cfg.seed, epoch as u64),
            },
        )?;
        for (b, batch) in buffer.enumerate() {
            trainer.step(batch?.data.rows(), epoch, b)?;
        }
    }
    Ok(trainer.into_inner())
}

/// Explained variance, cosine similarity and sparsity of `sae` on `data`,
/// encoding in chunks so the full code matrix is never materialized.
pub fn reconstruction_metrics(sae: &dyn SparseAutoencoder<f32>, data: &ActivationDataset) -> Result<MetricsReport> {
    let x = data.rows();
    let mut recon = Array2::<f32>::zeros(x.dim());
    let (mut l0, mut l1, mut ratio, mut hoy, mut nonzero) = (0usize, 0.0, 0.0, 0.0, 0usize);
    let mut row_buf = vec![0.0f64; sae.n_latents()];
    for start in (0..x.nrows()).step_by(CHUNK_ROWS) {
        let end = (start + CHUNK_ROWS).min(x.nrows());
        let z = sae.encode(x.slice(s![start..end, ..]));
        recon.slice_mut(s![start..end, ..]).assign(&sae.decode(z.view()));
        for row in z.axis_iter(Axis(0)) {
            for (d, v) in row_buf.iter_mut().zip(row.iter()) {
                *d = *v as f64;
            }
            l0 += row_buf.iter().filter(|v| v.abs() > L0_THRESHOLD).count();
            let r1: f64 = row_buf.iter().map(|v| v.abs()).sum();
            l1 += r1;
            let r2 = row_buf.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r2 > 0.0 {
                ratio += r1 / r2.sqrt();
                hoy += hoyer(&row_buf)?;
                nonzero += 1;
            }
        }
    }
    let n = x.nrows().max(1) as f64;
    let nz = nonzero.max(1) as f64;
    Ok(MetricsReport {
        explained_variance: explained_variance(x, recon.view())?,
        cosine_sim: cosine_similarity(x, recon.view())?,
        mean_l0: l0 as f64 / n,
        mean_l1: l1 / n,
        mean_l1_over_sqrt_l2: ratio / nz,
        mean_hoyer: hoy / nz,
        ..Default::default()
    })
}

/// Mean token entropy over the sampled latents' max-activating windows.
pub fn sae_token_entropy(
    sae: &dyn SparseAutoencoder<f32>,
    data: &ActivationDataset,
    dossier: &DossierConfig,
) -> Result<f64> {
    let set = collect_dossiers(sae, data, dossier)?;
    let flat: Vec<(Vec<u32>, Vec<f64>)> = set
        .dossiers
        .iter()
        .map(|d| {
            let tokens = d.examples.iter().flat_map(|e| e.tokens.iter().copied()).collect();
            let acts = d
                .examples
                .iter()
                .flat_map(|e| e.activations.iter().map(|&a| a.max(0.0) as f64))
                .collect();
            (tokens, acts)
        })
        .collect();
    token_entropy(flat.iter().map(|(t, a)| (t.as_slice(), a.as_slice())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerOutcome {
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<RunFailure>,
}

pub fn layers_of(cfg: &TransformerEvalConfig) -> Vec<usize> {
    cfg.layers.clone().unwrap_or_else(|| (0..cfg.spec.n_layers).collect())
}

/// Per-layer TopK SAE metrics for one variant.
pub fn eval_variant(
    cfg: &TransformerEvalConfig,
    variant: Variant,
    seed: u64,
    train_seqs: &[Vec<u32>],
    eval_seqs: &[Vec<u32>],
) -> Result<Vec<MetricsReport>> {
    let layers = layers_of(cfg);
    let params = build_variant(cfg, variant, seed)?;
    let model = Transformer::new(&cfg.spec, &params)?;
    let train_caps = model.capture_residuals(train_seqs, 0, &layers)?;
    let eval_caps = model.capture_residuals(eval_seqs, EVAL_KEY_OFFSET, &layers)?;
    let n_ce = cfg.ce_sequences.min(eval_seqs.len());
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut out = Vec::new();
    for (tc, ec) in train_caps.iter().zip(&eval_caps) {
        let layer = tc.layer;
        let sae = train_topk_on_capture(&tc.data, cfg.expansion, cfg.k, &train_cfg, cfg.buffer_capacity)?;
        let mut r = reconstruction_metrics(&sae, &ec.data)?;
        let ce = ce_losses(&model, &sae, layer, &eval_seqs[..n_ce], EVAL_KEY_OFFSET)?;
        match ce.score() {
            Ok(v) => r.ce_loss_score = Some(v),
            Err(e) => log::warn!("{variant} layer {layer}: CE loss score undefined: {e}"),
        }
        r.ce_orig = Some(ce.orig);
        r.ce_recon = Some(ce.recon);
        r.ce_zero = Some(ce.zero);
        let dossier = DossierConfig { seed, ..cfg.dossier };
        r.token_entropy = Some(sae_token_entropy(&sae, &ec.data, &dossier)?);
        r.run_id = format!("{variant}/layer={layer}/seed={seed}");
        r.variant = Some(variant.name().to_string());
        r.layer = Some(layer);
        r.k = Some(cfg.k);
        r.seed = seed;
        log::info!(
            "{}: ev={:.4} entropy={:.4} l0={:.2}",
            r.run_id,
            r.explained_variance,
            r.token_entropy.unwrap_or(f64::NAN),
            r.mean_l0
        );
        out.push(r);
    }
    Ok(out)
}

/// Every configured variant and layer for every seed; a failing variant is
/// recorded and the rest continue.
pub fn run_transformer_eval(cfg: &TransformerEvalConfig, seeds: &[u64]) -> Result<TransformerOutcome> {
    cfg.spec.validate()?;
    let (mut reports, mut failures) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let (train_seqs, eval_seqs) = corpus_sequences(cfg, seed)?;
        for &variant in &cfg.variants {
            match eval_variant(cfg, variant, seed, &train_seqs, &eval_seqs) {
                Ok(rs) => reports.extend(rs),
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
    reports.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(TransformerOutcome { reports, failures })
}
