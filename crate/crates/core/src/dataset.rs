//! The dense-vector container shared by every experiment, plus its on-disk
//! formats.
//!
//! `SLAB1` binary layout (all integers and floats little-endian):
//!
//! ```text
//! b"SLAB1"  u32 n_samples  u32 n_dense  u32 flags  [u32 n_sparse if flags & 1]
//! f32 rows[n_samples * n_dense]                       row-major
//! f32 coefficients[n_samples * n_sparse]              if flags & 1
//! u32 token_ids[n_samples]                            if flags & 2
//! u32 positions[n_samples]                            if flags & 4
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

pub const SLAB_MAGIC: &[u8; 5] = b"SLAB1";
const FLAG_COEFFICIENTS: u32 = 1;
const FLAG_TOKEN_IDS: u32 = 2;
const FLAG_POSITIONS: u32 = 4;

/// A matrix of dense vectors (one per row) with optional per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    rows: Array2<f32>,
    token_ids: Option<Vec<u32>>,
    positions: Option<Vec<u32>>,
    coefficients: Option<Array2<f32>>,
}

impl ActivationDataset {
    pub fn new(rows: Array2<f32>) -> Result<Self> {
        ensure!(
            rows.iter().all(|v| v.is_finite()),
            "dataset contains non-finite entries"
        );
        Ok(Self {
            rows,
            token_ids: None,
            positions: None,
            coefficients: None,
        })
    }

    pub fn with_token_ids(mut self, ids: Vec<u32>) -> Result<Self> {
        ensure!(
            ids.len() == self.rows.nrows(),
            "token_ids length {} != n_samples {}",
            ids.len(),
            self.rows.nrows()
        );
        self.token_ids = Some(ids);
        Ok(self)
    }

    pub fn with_positions(mut self, positions: Vec<u32>) -> Result<Self> {
        ensure!(
            positions.len() == self.rows.nrows(),
            "positions length {} != n_samples {}",
            positions.len(),
            self.rows.nrows()
        );
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn with_coefficients(mut self, coefficients: Array2<f32>) -> Result<Self> {
        ensure!(
            coefficients.nrows() == self.rows.nrows(),
            "coefficients have {} rows, dataset has {}",
            coefficients.nrows(),
            self.rows.nrows()
        );
        ensure!(
            coefficients.iter().all(|v| v.is_finite()),
            "coefficients contain non-finite entries"
        );
        self.coefficients = Some(coefficients);
        Ok(self)
    }

    pub fn rows(&self) -> ArrayView2<'_, f32> {
        self.rows.view()
    }

    pub fn into_rows(self) -> Array2<f32> {
        self.rows
    }

    pub fn token_ids(&self) -> Option<&[u32]> {
        self.token_ids.as_deref()
    }

    pub fn positions(&self) -> Option<&[u32]> {
        self.positions.as_deref()
    }

    pub fn coefficients(&self) -> Option<ArrayView2<'_, f32>> {
        self.coefficients.as_ref().map(|c| c.view())
    }

    pub fn n_samples(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_dense(&self) -> usize {
        self.rows.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// New dataset holding the given rows (and their metadata) in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let pick_vec = |v: &Vec<u32>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            rows: self.rows.select(Axis(0), indices),
            token_ids: self.token_ids.as_ref().map(pick_vec),
            positions: self.positions.as_ref().map(pick_vec),
            coefficients: self.coefficients.as_ref().map(|c| c.select(Axis(0), indices)),
        }
    }

    /// Stacks datasets row-wise. Metadata survives only when every part has it.
    pub fn concat(parts: &[ActivationDataset]) -> Result<Self> {
        ensure!(!parts.is_empty(), "nothing to concatenate");
        let dim = parts[0].n_dense();
        ensure!(parts.iter().all(|p| p.n_dense() == dim), "datasets disagree on n_dense");
        let views: Vec<_> = parts.iter().map(|p| p.rows.view()).collect();
        let rows = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let join = |get: fn(&ActivationDataset) -> Option<&Vec<u32>>| {
            if parts.iter().all(|p| get(p).is_some()) {
                Some(parts.iter().flat_map(|p| get(p).unwrap().iter().copied()).collect())
            } else {
                None
            }
        };
        let token_ids = join(|p| p.token_ids.as_ref());
        let positions = join(|p| p.positions.as_ref());
        Ok(Self {
            rows,
            token_ids,
            positions,
            coefficients: None,
        })
    }

    /// SHA-256 over the SLAB1 encoding; used as dataset provenance.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_slab(&mut buf).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }

    pub fn write_slab<W: Write>(&self, mut w: W) -> Result<()> {
        let mut flags = 0u32;
        if self.coefficients.is_some() {
            flags |= FLAG_COEFFICIENTS;
        }
        if self.token_ids.is_some() {
            flags |= FLAG_TOKEN_IDS;
        }
        if self.positions.is_some() {
            flags |= FLAG_POSITIONS;
        }
        w.write_all(SLAB_MAGIC)?;
        w.write_all(&u32_of(self.n_samples())?.to_le_bytes())?;
        w.write_all(&u32_of(self.n_dense())?.to_le_bytes())?;
        w.write_all(&flags.to_le_bytes())?;
        if let Some(c) = &self.coefficients {
            w.write_all(&u32_of(c.ncols())?.to_le_bytes())?;
        }
        for v in self.rows.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(c) = &self.coefficients {
            for v in c.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for ids in [&self.token_ids, &self.positions].into_iter().flatten() {
            for v in ids {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_slab<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != SLAB_MAGIC {
            return Err(slab_err(format!("bad magic {magic:?}")));
        }
        let n = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let flags = read_u32(&mut r)?;
        if flags & !(FLAG_COEFFICIENTS | FLAG_TOKEN_IDS | FLAG_POSITIONS) != 0 {
            return Err(slab_err(format!("unknown flags {flags:#x}")));
        }
        let n_sparse = if flags & FLAG_COEFFICIENTS != 0 {
            Some(read_u32(&mut r)? as usize)
        } else {
            None
        };
        let rows = Array2::from_shape_vec((n, d), read_f32s(&mut r, n * d)?).map_err(|e| slab_err(e.to_string()))?;
        let mut ds = ActivationDataset::new(rows)?;
        if let Some(s) = n_sparse {
            let c = Array2::from_shape_vec((n, s), read_f32s(&mut r, n * s)?).map_err(|e| slab_err(e.to_string()))?;
            ds = ds.with_coefficients(c)?;
        }
        if flags & FLAG_TOKEN_IDS != 0 {
            ds = ds.with_token_ids(read_u32s(&mut r, n)?)?;
        }
        if flags & FLAG_POSITIONS != 0 {
            ds = ds.with_positions(read_u32s(&mut r, n)?)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(slab_err("trailing bytes after payload".into()));
        }
        Ok(ds)
    }

    pub fn save_slab(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_slab(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_slab(path: &Path) -> Result<Self> {
        Self::read_slab(BufReader::new(File::open(path)?))
    }

    /// CSV with columns `x0..x{d-1}`, then `c0..` coefficients, `token_id`
    /// and `position` when present.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.n_dense()).map(|j| format!("x{j}")).collect();
        if let Some(c) = &self.coefficients {
            header.extend((0..c.ncols()).map(|j| format!("c{j}")));
        }
        if self.token_ids.is_some() {
            header.push("token_id".into());
        }
        if self.positions.is_some() {
            header.push("position".into());
        }
        out.write_record(&header)?;
        for i in 0..self.n_samples() {
            let mut rec: Vec<String> = self.rows.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(c) = &self.coefficients {
                rec.extend(c.row(i).iter().map(|v| v.to_string()));
            }
            if let Some(t) = &self.token_ids {
                rec.push(t[i].to_string());
            }
            if let Some(p) = &self.positions {
                rec.push(p[i].to_string());
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let n_x = header.iter().filter(|h| h.starts_with('x')).count();
        let n_c = header.iter().filter(|h| h.starts_with('c')).count();
        let tok_col = header.iter().position(|h| h == "token_id");
        let pos_col = header.iter().position(|h| h == "position");
        let (mut xs, mut cs, mut toks, mut poss) = (vec![], vec![], vec![], vec![]);
        let mut n = 0usize;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |msg: String| Error::Format {
                format: "csv",
                msg: format!("record {}: {msg}", line + 1),
            };
            let f = |k: usize| -> Result<f32> {
                rec.get(k)
                    .ok_or_else(|| bad(format!("missing column {k}")))?
                    .parse::<f32>()
                    .map_err(|e| bad(e.to_string()))
            };
            for k in 0..n_x {
                xs.push(f(k)?);
            }
            for k in 0..n_c {
                cs.push(f(n_x + k)?);
            }
            let u = |k: usize| -> Result<u32> {
                rec.get(k)
                    .ok_or_else(|| bad(format!("missing column {k}")))?
                    .parse::<u32>()
                    .map_err(|e| bad(e.to_string()))
            };
            if let Some(k) = tok_col {
                toks.push(u(k)?);
            }
            if let Some(k) = pos_col {
                poss.push(u(k)?);
            }
            n += 1;
        }
        let mut ds =
            Self::new(Array2::from_shape_vec((n, n_x), xs).map_err(|e| Error::InvalidArgument(e.to_string()))?)?;
        if n_c > 0 {
            ds = ds.with_coefficients(
                Array2::from_shape_vec((n, n_c), cs).map_err(|e| Error::InvalidArgument(e.to_string()))?,
            )?;
        }
        if tok_col.is_some() {
            ds = ds.with_token_ids(toks)?;
        }
        if pos_col.is_some() {
            ds = ds.with_positions(poss)?;
        }
        Ok(ds)
    }
}

fn slab_err(msg: String) -> Error {
    Error::Format { format: "SLAB1", msg }
}

pub(crate) fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} does not fit in u32")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_u32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<u32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_finite_rows() {
        assert!(ActivationDataset::new(array![[1.0, f32::NAN]]).is_err());
        assert!(ActivationDataset::new(array![[f32::INFINITY]]).is_err());
    }

    #[test]
    fn token_ids_must_match_rows() {
        let ds = ActivationDataset::new(array![[1.0], [2.0]]).unwrap();
        assert!(ds.clone().with_token_ids(vec![1]).is_err());
        assert!(ds.with_token_ids(vec![1, 2]).is_ok());
    }

    #[test]
    fn slab_header_layout() {
        let ds = ActivationDataset::new(array![[1.0f32, 2.0]])
            .unwrap()
            .with_token_ids(vec![9])
            .unwrap();
        let mut buf = Vec::new();
        ds.write_slab(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"SLAB1");
        assert_eq!(&buf[5..9], &1u32.to_le_bytes());
        assert_eq!(&buf[9..13], &2u32.to_le_bytes());
        assert_eq!(&buf[13..17], &FLAG_TOKEN_IDS.to_le_bytes());
        assert_eq!(&buf[17..21], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 17 + 8 + 4);
    }

    #[test]
    fn slab_rejects_garbage() {
        assert!(ActivationDataset::read_slab(&b"SLAB2\0\0\0\0"[..]).is_err());
        let ds = ActivationDataset::new(array![[1.0f32]]).unwrap();
        let mut buf = Vec::new();
        ds.write_slab(&mut buf).unwrap();
        buf.push(0);
        assert!(ActivationDataset::read_slab(&buf[..]).is_err());
    }

    #[test]
    fn csv_keeps_metadata() {
        let ds = ActivationDataset::new(array![[0.5f32, -1.25], [3.0, 4.0]])
            .unwrap()
            .with_coefficients(array![[1.0f32], [0.0]])
            .unwrap()
            .with_token_ids(vec![4, 5])
            .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(ActivationDataset::read_csv(&buf[..]).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn slab_round_trip(
            n in 0usize..6, d in 1usize..5, s in 1usize..4,
            seed in any::<u64>(), with_meta in any::<bool>()
        ) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, 0);
            let rows = Array2::from_shape_fn((n, d), |_| rng.random_range(-1e3f32..1e3));
            let mut ds = ActivationDataset::new(rows).unwrap();
            if with_meta {
                let c = Array2::from_shape_fn((n, s), |_| rng.random::<f32>());
                ds = ds.with_coefficients(c).unwrap()
                    .with_token_ids((0..n as u32).collect()).unwrap()
                    .with_positions((0..n as u32).rev().collect()).unwrap();
            }
            let mut buf = Vec::new();
            ds.write_slab(&mut buf).unwrap();
            prop_assert_eq!(ActivationDataset::read_slab(&buf[..]).unwrap(), ds);
        }
    }
}
