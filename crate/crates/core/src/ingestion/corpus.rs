use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// End-of-document marker.
pub const BOUNDARY: u32 = 256;
pub const PAD: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

/// UTF-8 bytes as token ids, plus two special ids.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Specials are dropped; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Display form of one token, used when rendering examples.
    pub fn token_str(&self, id: u32) -> String {
        match id {
            BOUNDARY => "<|endoftext|>".into(),
            PAD => "<|pad|>".into(),
            b if b < 256 => {
                let b = b as u8;
                if b.is_ascii() {
                    (b as char).to_string()
                } else {
                    format!("<0x{b:02X}>")
                }
            }
            other => format!("<{other}>"),
        }
    }
}

/// Token ids of a corpus with a boundary marker after every document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub vocab_size: usize,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Consecutive non-overlapping sequences of `len` tokens. A shorter tail
    /// is kept when it has at least two tokens.
    pub fn sequences(&self, len: usize) -> Vec<Vec<u32>> {
        assert!(len > 0, "sequence length must be positive");
        self.ids
            .chunks(len)
            .filter(|c| c.len() >= 2)
            .map(<[u32]>::to_vec)
            .collect()
    }
}

pub fn tokenize<S: AsRef<str>>(documents: &[S]) -> TokenStream {
    let tok = ByteTokenizer;
    let mut ids = Vec::with_capacity(documents.iter().map(|d| d.as_ref().len() + 1).sum());
    for d in documents {
        ids.extend(tok.encode(d.as_ref()));
        ids.push(BOUNDARY);
    }
    TokenStream {
        ids,
        vocab_size: VOCAB_SIZE,
    }
}

/// Inverse of [`tokenize`]: one string per boundary-terminated document.
pub fn detokenize(stream: &TokenStream) -> Vec<String> {
    let tok = ByteTokenizer;
    if stream.ids.is_empty() {
        return Vec::new();
    }
    let mut docs: Vec<String> = stream.ids.split(|&t| t == BOUNDARY).map(|d| tok.decode(d)).collect();
    if stream.ids.last() == Some(&BOUNDARY) {
        docs.pop();
    }
    docs
}

#[derive(Deserialize)]
struct JsonDoc {
    text: String,
}

/// Documents from a `.jsonl` file (`{"text": …}` per line) or any other file
/// read as a single UTF-8 document.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let is_jsonl = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("jsonl"));
    if !is_jsonl {
        let bytes = std::fs::read(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("invalid UTF-8: {e}"),
        })?;
        return Ok(vec![text]);
    }
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: JsonDoc = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        docs.push(doc.text);
    }
    Ok(docs)
}

const CONSONANTS: &[u8] = b"bcdfghklmnprstvw";
const VOWELS: &[u8] = b"aeiou";

/// English-like filler text of roughly `n_bytes` bytes: pseudo-words drawn
/// from a Zipf-distributed vocabulary, grouped into sentences and documents.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<String> {
    let mut rng = rng::stream(seed, streams::CORPUS);
    let vocab: Vec<String> = (0..2000)
        .map(|_| {
            let syllables = rng.random_range(1..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
                if rng.random_bool(0.3) {
                    w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
                }
            }
            w
        })
        .collect();
    let zipf = Zipf::new(vocab.len() as f64, 1.1).expect("valid Zipf parameters");
    let mut docs = Vec::new();
    let mut total = 0;
    while total < n_bytes {
        let mut doc = String::new();
        let n_sentences = rng.random_range(3..12);
        for s in 0..n_sentences {
            if s > 0 {
                doc.push(' ');
            }
            let n_words = rng.random_range(4..16);
            for w in 0..n_words {
                let word = &vocab[zipf.sample(&mut rng) as usize - 1];
                if w == 0 {
                    let mut c = word.chars();
                    let first = c.next().unwrap().to_ascii_uppercase();
                    doc.push(first);
                    doc.push_str(c.as_str());
                } else {
                    doc.push(' ');
                    doc.push_str(word);
                    if w + 1 < n_words && rng.random_bool(0.08) {
                        doc.push(',');
                    }
                }
            }
            doc.push(if rng.random_bool(0.1) { '?' } else { '.' });
        }
        total += doc.len() + 1;
        docs.push(doc);
    }
    docs
}
