//! `VFPAR1` parameter checkpoints.
//!
//! Layout: the 6-byte magic `VFPAR1`, then one record per parameter until end
//! of file. A record is `name_len: u32`, `name: [u8; name_len]` (UTF-8),
//! `rank: u32`, `dims: [u64; rank]`, `values: [f64; prod(dims)]`, all
//! little-endian.

use std::io::{Read, Write};

use super::array::Array;
use super::params::ParamSet;
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 6] = b"VFPAR1";

pub fn write_params<W: Write>(mut w: W, params: &ParamSet) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::Format("truncated parameter record".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated parameter record".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads every `(name, value)` record of a checkpoint.
pub fn read_params<R: Read>(mut r: R) -> Result<Vec<(String, Array)>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| Error::Format("missing VFPAR1 header".into()))?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Format("bad magic, expected VFPAR1".into()));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len)? {
            break;
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|_| Error::Format("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated dims".into()))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|_| Error::Format(format!("truncated values for `{name}`")))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Array::new(shape, data)?));
    }
    Ok(out)
}

/// Loads a checkpoint into an existing set; names, order, and shapes must match.
pub fn load_into<R: Read>(r: R, params: &mut ParamSet) -> Result<()> {
    let records = read_params(r)?;
    if records.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            records.len(),
            params.len()
        )));
    }
    for ((name, value), p) in records.into_iter().zip(params.iter_mut()) {
        if name != p.name || value.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "checkpoint record `{name}` {:?} does not match parameter `{}` {:?}",
                value.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = value;
    }
    Ok(())
}
