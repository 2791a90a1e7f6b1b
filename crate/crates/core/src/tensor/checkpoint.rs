//! Binary checkpoint format.
//!
//! ```text
//! magic    b"CNDA"
//! version  u16 LE
//! count    u32 LE
//! repeated count times:
//!   name_len u16 LE, name (UTF-8)
//!   rank     u8
//!   dims     rank × u64 LE
//!   data     product(dims) × f32 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Result, Tensor, TensorError};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CNDA";
pub const VERSION: u16 = 1;

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write<S: Scalar, W: Write>(out: &mut W, tensors: &[(String, Tensor<S>)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| bad("too many tensors"))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| bad("rank exceeds 255"))?;
        out.write_all(&[rank])?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&x.as_f32().to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

pub fn read<S: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<S>)>> {
    if &take::<4, _>(r)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(take(r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(r)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let rank = take::<1, _>(r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| bad(format!("truncated data for `{name}`: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| S::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Every parameter in `store`, followed by `extra` tensors (e.g. metadata).
pub fn save_store<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    extra: &[(String, Tensor<S>)],
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor<S>)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    tensors.extend(extra.iter().cloned());
    let mut buf = Vec::new();
    write(&mut buf, &tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let bytes = std::fs::read(path)?;
    read(&mut bytes.as_slice())
}
