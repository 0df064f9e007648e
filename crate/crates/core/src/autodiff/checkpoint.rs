//! Binary weight checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "PLWTS 1\n"
//! count
//! repeated count times:
//!     name_len, name (UTF-8), ndim, dims[ndim], values (f32 LE × prod(dims))
//! ```

use std::fs;
use std::io;
use std::path::Path;

use super::{Real, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"PLWTS 1\n";

pub fn encode_weights<T: Real>(params: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("weights truncated at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub fn decode_weights(bytes: &[u8]) -> io::Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(WEIGHTS_MAGIC.len())? != WEIGHTS_MAGIC {
        return Err(invalid("missing PLWTS 1 header".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| invalid(format!("parameter name: {e}")))?
            .to_owned();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| invalid(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_weights<T: Real>(
    path: impl AsRef<Path>,
    params: &[(String, Tensor<T>)],
) -> io::Result<()> {
    fs::write(path, encode_weights(params))
}

pub fn load_weights(path: impl AsRef<Path>) -> io::Result<Vec<(String, Tensor<f32>)>> {
    decode_weights(&fs::read(path)?)
}
