use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;

use crate::dataset::ActivationDataset;
use crate::error::{Error, Result};

/// Words and their vectors, one row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorSet {
    pub vocabulary: Vec<String>,
    pub vectors: Array2<f32>,
}

impl WordVectorSet {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocabulary.is_empty()
    }

    pub fn to_dataset(&self) -> Result<ActivationDataset> {
        ActivationDataset::new(self.vectors.clone())
    }
}

pub fn load_glove(path: &Path) -> Result<WordVectorSet> {
    parse_glove(BufReader::new(File::open(path)?), path)
}

/// Parses whitespace-separated `word f1 … fd` lines. Blank lines are skipped;
/// every other line must carry the same number of finite floats.
pub fn parse_glove<R: BufRead>(reader: R, path: &Path) -> Result<WordVectorSet> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut vocabulary = Vec::new();
    let mut seen = HashSet::new();
    let mut data: Vec<f32> = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| err(lineno, e.to_string()))?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let start = data.len();
        for f in fields {
            let v: f32 = f.parse().map_err(|_| err(lineno, format!("bad float {f:?}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite value {f:?}")));
            }
            data.push(v);
        }
        let n = data.len() - start;
        match dim {
            None if n == 0 => return Err(err(lineno, "no vector components".into())),
            None => dim = Some(n),
            Some(d) if d != n => return Err(err(lineno, format!("expected {d} components, found {n}"))),
            _ => {}
        }
        if !seen.insert(word.to_string()) {
            return Err(err(lineno, format!("duplicate word {word:?}")));
        }
        vocabulary.push(word.to_string());
    }
    let d = dim.unwrap_or(0);
    let vectors =
        Array2::from_shape_vec((vocabulary.len(), d), data).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(WordVectorSet { vocabulary, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<WordVectorSet> {
        parse_glove(s.as_bytes(), Path::new("fixture.txt"))
    }

    #[test]
    fn two_line_fixture() {
        let set = parse("a 1 0\nb 0 1").unwrap();
        assert_eq!(set.vocabulary, ["a", "b"]);
        assert_eq!(set.vectors, ndarray::array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn wrong_float_count_names_line() {
        match parse("a 1 0\nb 0 1\nc 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_float_and_duplicate_are_rejected() {
        assert!(matches!(parse("a 1 x"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("a 1\na 2"), Err(Error::Parse { line: 2, .. })));
    }
}
