//! Binary checkpoint: versioned header plus named little-endian f64 arrays.
//!
//! Layout: `MPSGCKPT`, u32 version, five u64 model dimensions, u32 parameter
//! count, then per parameter a u32-length UTF-8 name, u32 rank, u64 extents
//! and the values.

use crate::decoder::{DecoderParams, ModelDims};
use crate::tensor::Tensor;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MPSGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes(params: &DecoderParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let d = &params.dims;
    for v in [d.num_queries, d.num_layers, d.dim, d.ffn_dim, d.num_categories] {
        put_u64(&mut out, v as u64);
    }
    let named = params.weights.named();
    put_u32(&mut out, named.len() as u32);
    for (name, t) in named {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &s in t.shape() {
            put_u64(&mut out, s as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn from_reader<R: Read>(r: R) -> Result<DecoderParams, CheckpointError> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut d = [0usize; 5];
    for v in &mut d {
        *v = r.u64()? as usize;
    }
    let dims = ModelDims {
        num_queries: d[0],
        num_layers: d[1],
        dim: d[2],
        ffn_dim: d[3],
        num_categories: d[4],
    };
    if d.iter().any(|&v| v == 0 || v > 1 << 20) {
        return Err(CheckpointError::Layout(format!("implausible dimensions {d:?}")));
    }
    let mut params = DecoderParams::init(dims, 0);
    let expected: Vec<(String, Vec<usize>)> = params
        .weights
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(CheckpointError::Layout(format!(
            "{count} parameters, expected {}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let len = r.u32()? as usize;
        if len > 1024 {
            return Err(CheckpointError::Layout("parameter name too long".into()));
        }
        let mut buf = vec![0u8; len];
        r.inner.read_exact(&mut buf)?;
        let got = String::from_utf8(buf).map_err(|_| CheckpointError::Layout("name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<io::Result<_>>()?;
        if &got != name || &dims != shape {
            return Err(CheckpointError::Layout(format!(
                "found {got} {dims:?}, expected {name} {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<io::Result<Vec<_>>>()?;
        loaded.push(Tensor::new(dims, data).map_err(|e| CheckpointError::Layout(e.to_string()))?);
    }
    let mut it = loaded.into_iter();
    params.weights.visit_mut(&mut |_, t| *t = it.next().expect("count checked"));
    Ok(params)
}

pub fn save(params: &DecoderParams, path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DecoderParams, CheckpointError> {
    from_reader(io::BufReader::new(std::fs::File::open(path)?))
}
