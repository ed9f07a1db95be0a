//! Flat binary parameter files: 4-byte magic, `u32` version, `u32` tensor
//! count, then per tensor a `u32` rank and `u32` dims, then every tensor's
//! data as little-endian `f64` in declaration order.

use std::fs;
use std::path::Path;

use diffcore::Tensor;

use crate::{Error, Result};

pub const PARAM_FILE_VERSION: u32 = 1;

pub fn encode(magic: &[u8; 4], tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&PARAM_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(path: &Path, magic: &[u8; 4], bytes: &[u8]) -> Result<Vec<Tensor>> {
    let truncated = || Error::parse(path, "truncated parameter file");
    let mut r = Reader { bytes, pos: 0 };
    let found = r.take(4).ok_or_else(truncated)?;
    if found != magic {
        return Err(Error::parse(
            path,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(found), String::from_utf8_lossy(magic)),
        ));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != PARAM_FILE_VERSION {
        return Err(Error::Version { path: path.into(), found: version, expected: PARAM_FILE_VERSION });
    }
    let count = r.u32().ok_or_else(truncated)? as usize;
    let mut shapes = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Option<Vec<_>>>().ok_or_else(truncated)?;
        shapes.push(dims);
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in shapes {
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::parse(path, e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(path, "trailing bytes after parameter data"));
    }
    Ok(tensors)
}

pub fn write(path: &Path, magic: &[u8; 4], tensors: &[&Tensor]) -> Result<()> {
    fs::write(path, encode(magic, tensors)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, magic: &[u8; 4]) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, magic, &bytes)
}
