use ndarray::Array2;
use rand::Rng;

use super::corpus::TokenStream;
use crate::dataset::ActivationDataset;
use crate::error::{ensure, Result};
use crate::randomnets::Transformer;
use crate::rng::{self, streams, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferConfig {
    /// In vectors.
    pub capacity: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// One training batch. `partial` marks the short final batch of a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub data: ActivationDataset,
    pub partial: bool,
}

/// Shuffling reservoir between an activation producer and SAE training.
///
/// The buffer fills up to `capacity`, shuffles, and serves batches from the
/// back; once at most half full (or short of a batch) it pulls more vectors
/// and reshuffles. Every produced vector is served exactly once, and only the
/// last batch can be short.
pub struct ActivationBuffer<I> {
    source: I,
    exhausted: bool,
    config: BufferConfig,
    rng: StreamRng,
    dim: Option<usize>,
    rows: Vec<f32>,
    tokens: Vec<u32>,
    positions: Vec<u32>,
    has_tokens: bool,
    has_positions: bool,
}

impl<I> ActivationBuffer<I>
where
    I: Iterator<Item = Result<ActivationDataset>>,
{
    pub fn new(source: I, config: BufferConfig) -> Result<Self> {
        ensure!(config.batch_size > 0, "batch_size must be positive");
        ensure!(
            config.capacity >= config.batch_size,
            "buffer capacity {} is below batch size {}",
            config.capacity,
            config.batch_size
        );
        Ok(Self {
            source,
            exhausted: false,
            config,
            rng: rng::stream(config.seed, streams::BUFFER_SHUFFLE),
            dim: None,
            rows: Vec::new(),
            tokens: Vec::new(),
            positions: Vec::new(),
            has_tokens: true,
            has_positions: true,
        })
    }

    pub fn len(&self) -> usize {
        match self.dim {
            Some(d) if d > 0 => self.rows.len() / d,
            _ => self.tokens.len().max(self.positions.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&mut self, chunk: ActivationDataset) -> Result<()> {
        let d = *self.dim.get_or_insert(chunk.n_dense());
        ensure!(
            chunk.n_dense() == d,
            "chunk has {} dims, buffer holds {d}",
            chunk.n_dense()
        );
        self.has_tokens &= chunk.token_ids().is_some();
        self.has_positions &= chunk.positions().is_some();
        self.rows.extend(chunk.rows().iter());
        if let Some(t) = chunk.token_ids() {
            self.tokens.extend_from_slice(t);
        }
        if let Some(p) = chunk.positions() {
            self.positions.extend_from_slice(p);
        }
        Ok(())
    }

    fn refill(&mut self) -> Result<()> {
        while !self.exhausted && self.len() < self.config.capacity {
            match self.source.next() {
                Some(chunk) => self.push(chunk?)?,
                None => self.exhausted = true,
            }
        }
        if !self.has_tokens {
            self.tokens.clear();
        }
        if !self.has_positions {
            self.positions.clear();
        }
        self.shuffle();
        Ok(())
    }

    fn shuffle(&mut self) {
        let n = self.len();
        let d = self.dim.unwrap_or(0);
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            if i == j {
                continue;
            }
            let (lo, hi) = self.rows.split_at_mut(i * d);
            lo[j * d..(j + 1) * d].swap_with_slice(&mut hi[..d]);
            if !self.tokens.is_empty() {
                self.tokens.swap(i, j);
            }
            if !self.positions.is_empty() {
                self.positions.swap(i, j);
            }
        }
    }

    fn pop(&mut self, n: usize) -> Result<ActivationDataset> {
        let d = self.dim.unwrap_or(0);
        let start = self.len() - n;
        let rows = Array2::from_shape_vec((n, d), self.rows.split_off(start * d))
            .expect("buffer rows are a whole number of vectors");
        let mut data = ActivationDataset::new(rows)?;
        if !self.tokens.is_empty() {
            data = data.with_token_ids(self.tokens.split_off(start))?;
        }
        if !self.positions.is_empty() {
            data = data.with_positions(self.positions.split_off(start))?;
        }
        Ok(data)
    }
}

impl<I> Iterator for ActivationBuffer<I>
where
    I: Iterator<Item = Result<ActivationDataset>>,
{
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let low = self.len() <= self.config.capacity / 2 || self.len() < self.config.batch_size;
        if !self.exhausted && low {
            if let Err(e) = self.refill() {
                self.exhausted = true;
                return Some(Err(e));
            }
        }
        let n = self.len();
        if n == 0 {
            return None;
        }
        let partial = n < self.config.batch_size;
        let take = n.min(self.config.batch_size);
        if partial {
            log::debug!("activation stream exhausted; final batch has {take} vectors");
        }
        Some(self.pop(take).map(|data| Batch { data, partial }))
    }
}

/// Buffer fed by residual-stream captures at `layer` over consecutive
/// `seq_len`-token sequences of `stream`. Sequence `i` uses key
/// `first_seq_key + i`; captures run `group` sequences at a time.
pub fn fill_buffer<'a>(
    model: &'a Transformer<'a>,
    stream: &TokenStream,
    seq_len: usize,
    layer: usize,
    first_seq_key: u64,
    config: BufferConfig,
) -> Result<ActivationBuffer<impl Iterator<Item = Result<ActivationDataset>> + 'a>> {
    const GROUP: usize = 16;
    ensure!(seq_len >= 2, "sequences need at least two tokens");
    let sequences = stream.sequences(seq_len);
    let n_groups = sequences.len().div_ceil(GROUP);
    let source = (0..n_groups).map(move |g| {
        let group = &sequences[g * GROUP..((g + 1) * GROUP).min(sequences.len())];
        let key = first_seq_key + (g * GROUP) as u64;
        let mut caps = model.capture_residuals(group, key, &[layer])?;
        Ok(caps.remove(0).data)
    });
    ActivationBuffer::new(source, config)
}
