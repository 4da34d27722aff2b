//! External data: GloVe vectors, byte-level corpora, embedding matrices and
//! the shuffling activation buffer.

mod buffer;
mod corpus;
mod glove;

pub use buffer::{fill_buffer, ActivationBuffer, Batch, BufferConfig};
pub use corpus::{
    detokenize, load_corpus, synthetic_corpus, tokenize, ByteTokenizer, TokenStream, BOUNDARY, PAD, VOCAB_SIZE,
};
pub use glove::{load_glove, parse_glove, WordVectorSet};

use crate::dataset::ActivationDataset;
use crate::error::Result;
use crate::randomnets::{NetParams, EMBED};

/// Rows of a checkpoint's token-embedding matrix, tagged with their token ids.
pub fn embedding_dataset(params: &NetParams) -> Result<ActivationDataset> {
    let embed = params.matrix(EMBED)?;
    let ids = (0..embed.nrows() as u32).collect();
    ActivationDataset::new(embed.to_owned())?.with_token_ids(ids)
}
