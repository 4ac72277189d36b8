//! Parameter checkpoint file.
//!
//! Layout (little-endian): magic "MLAB", version u32, parameter count u32,
//! then per parameter: name length u32, name bytes, shape rank u32, dims
//! u32 each, values as f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ParamSet, Shape5, Tensor5};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLAB";
const VERSION: u32 = 1;

pub fn save_params<S: Scalar>(params: &ParamSet<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let s = t.shape();
        let dims = [s.n, s.c, s.t, s.h, s.w];
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.values().iter() {
            w.write_all(&(v.to_f64_() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params<S: Scalar>(path: impl AsRef<Path>) -> Result<ParamSet<S>> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    read_all(&mut r, &mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "checkpoint: bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut r, "checkpoint version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r, "checkpoint parameter count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let name_len = read_u32(&mut r, "parameter name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_all(&mut r, &mut name, "parameter name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format(format!("checkpoint: parameter {i} name not UTF-8")))?;
        let rank = read_u32(&mut r, "shape rank")? as usize;
        if rank != 5 {
            return Err(Error::Format(format!(
                "checkpoint: parameter {name} has rank {rank}, expected 5"
            )));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r, "shape dim")? as usize;
        }
        let shape = Shape5::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
        let mut values = Vec::with_capacity(shape.numel());
        for _ in 0..shape.numel() {
            let mut b = [0u8; 4];
            read_all(&mut r, &mut b, "parameter values")?;
            values.push(S::from_f64_(f32::from_le_bytes(b) as f64));
        }
        params.insert(name, Tensor5::param(shape, values))?;
    }
    Ok(params)
}

fn read_all(r: &mut impl Read, buf: &mut [u8], context: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::truncated(context, buf.len(), 0))
}

fn read_u32(r: &mut impl Read, context: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_all(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}
