//! `SLCK1` named-tensor container.
//!
//! ```text
//! b"SLCK1"  u32 tensor_count
//! repeated: u32 name_len, name (UTF-8), u8 rank, u32 dims[rank], f32 data (LE, row-major)
//! ```
//! Tensors are written in name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::dataset::{read_f32s, read_u32, u32_of};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SLCK1";

pub type TensorMap = BTreeMap<String, ArrayD<f32>>;

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Format {
        format: "SLCK1",
        msg: msg.into(),
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &TensorMap) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&u32_of(tensors.len())?.to_le_bytes())?;
    for (name, t) in tensors {
        let rank = u8::try_from(t.ndim()).map_err(|_| ck_err(format!("{name}: rank too large")))?;
        w.write_all(&u32_of(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&u32_of(d)?.to_le_bytes())?;
        }
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<TensorMap> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck_err(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = TensorMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| ck_err(e.to_string()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let dims = (0..rank[0])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = read_f32s(&mut r, n)?;
        let t = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| ck_err(e.to_string()))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(ck_err(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &TensorMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<TensorMap> {
    read_tensors(BufReader::new(File::open(path)?))
}

/// Path of the JSON sidecar that accompanies a checkpoint.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}
