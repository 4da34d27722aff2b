use ndarray::{ArrayD, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{max_column_norm_error, normalize_columns, SparseAutoencoder};
use crate::error::{ensure, Error, Result};
use crate::metrics;
use crate::real::Real;
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Standard SAE only.
    pub l1_coef: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            l1_coef: 0.0,
            val_fraction: 0.1,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mean_l0: f64,
    pub val_mean_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub family: String,
    pub epochs: Vec<EpochMetrics>,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub n_train: usize,
    pub n_val: usize,
    /// SHA-256 of the final parameters.
    pub final_params_id: String,
}

/// Deterministic train/validation split: a seeded permutation whose last
/// `round(n · val_fraction)` entries (at least one when `n > 1`) form the
/// validation set. Both parts are returned sorted.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, streams::SAE_SPLIT));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n > 1 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

struct Adam<F> {
    lr: F,
    beta1: f64,
    beta2: f64,
    eps: F,
    step: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    fn new(shapes: &[Vec<usize>], lr: f64, cfg: OptimizerConfig) -> Self {
        let OptimizerConfig::Adam { beta1, beta2, eps } = cfg;
        let zeros = || shapes.iter().map(|s| ArrayD::zeros(s.as_slice())).collect();
        Self {
            lr: F::of(lr),
            beta1,
            beta2,
            eps: F::of(eps),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn update<S: SparseAutoencoder<F>>(&mut self, sae: &mut S, grads: &[ArrayD<F>]) {
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(self.step));
        let c2 = F::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (self.lr, self.eps);
        for (((mut p, g), m), v) in sae
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            Zip::from(&mut p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

fn params_id<F: Real, S: SparseAutoencoder<F>>(sae: &mut S) -> String {
    let mut h = Sha256::new();
    for t in sae.tensors_mut() {
        for v in t.iter() {
            h.update(v.f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Adam state around an SAE, advanced one mini-batch at a time. Decoder
/// columns are renormalized before each gradient computation and again after
/// each update, so the decoder is unit-norm at every step boundary.
pub struct Trainer<F, S> {
    sae: S,
    adam: Adam<F>,
    l1: F,
}

impl<F: Real, S: SparseAutoencoder<F>> Trainer<F, S> {
    pub fn new(mut sae: S, config: &TrainConfig) -> Self {
        let shapes: Vec<Vec<usize>> = sae.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        Self {
            adam: Adam::new(&shapes, config.learning_rate, config.optimizer),
            l1: F::of(config.l1_coef),
            sae,
        }
    }

    pub fn sae(&self) -> &S {
        &self.sae
    }

    pub fn into_inner(self) -> S {
        self.sae
    }

    /// One optimizer step; returns the batch loss. `epoch` and `batch` only
    /// label the error raised on a non-finite loss or gradient.
    pub fn step(&mut self, x: ArrayView2<'_, F>, epoch: usize, batch: usize) -> Result<f64> {
        ensure!(
            x.ncols() == self.sae.n_inputs(),
            "batch has {} dims, SAE expects {}",
            x.ncols(),
            self.sae.n_inputs()
        );
        normalize_columns(self.sae.decoder_mut());
        let out = self.sae.loss_and_grads(x, self.l1);
        if !out.loss.is_finite() || out.grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            log::error!("non-finite loss at epoch {epoch}, batch {batch}");
            return Err(Error::NonFiniteLoss { epoch, batch });
        }
        self.adam.update(&mut self.sae, &out.grads);
        normalize_columns(self.sae.decoder_mut());
        debug_assert!(max_column_norm_error(self.sae.decoder()) < 1e-6);
        Ok(out.loss.f64())
    }
}

/// Reconstruction MSE (per element) and mean L0/L1 of the codes.
pub fn evaluate<F: Real, S: SparseAutoencoder<F>>(sae: &S, x: ArrayView2<'_, F>) -> (f64, f64, f64) {
    let z = sae.encode(x);
    let recon = sae.decode(z.view());
    let mse = (&recon - &x).iter().map(|e| e.f64() * e.f64()).sum::<f64>() / x.len().max(1) as f64;
    let (l0, l1) = metrics::mean_l0_l1(z.view());
    (mse, l0, l1)
}

/// Adam over shuffled mini-batches of the training split for
/// `config.epochs` passes, with validation metrics after every epoch.
pub fn train<F: Real, S: SparseAutoencoder<F>>(
    sae: S,
    data: ArrayView2<'_, F>,
    config: &TrainConfig,
) -> Result<(S, TrainReport)> {
    ensure!(
        data.ncols() == sae.n_inputs(),
        "data has {} dims, SAE expects {}",
        data.ncols(),
        sae.n_inputs()
    );
    ensure!(config.batch_size >= 1, "batch_size must be positive");
    ensure!(
        data.nrows() >= config.batch_size,
        "need at least batch_size ({}) rows, got {}",
        config.batch_size,
        data.nrows()
    );
    ensure!(
        config.val_fraction > 0.0 && config.val_fraction < 1.0,
        "val_fraction must lie in (0, 1)"
    );
    let (train_idx, val_idx) = split_indices(data.nrows(), config.val_fraction, config.seed);
    let val = data.select(Axis(0), &val_idx);
    let mut trainer = Trainer::new(sae, config);
    let mut shuffle_rng = rng::stream(config.seed, streams::SAE_SHUFFLE);
    let mut order = train_idx.clone();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = data.select(Axis(0), chunk);
            loss_sum += trainer.step(batch.view(), epoch, batch_no)?;
            n_batches += 1;
        }
        let (val_mse, l0, l1) = evaluate(trainer.sae(), val.view());
        epochs.push(EpochMetrics {
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_mse,
            val_mean_l0: l0,
            val_mean_l1: l1,
        });
        log::debug!("epoch {epoch}: {:?}", epochs.last());
    }
    let mut sae = trainer.into_inner();
    let final_params_id = params_id(&mut sae);
    let report = TrainReport {
        family: sae.family().name().to_string(),
        epochs,
        learning_rate: config.learning_rate,
        optimizer: config.optimizer,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        final_params_id,
    };
    Ok((sae, report))
}
