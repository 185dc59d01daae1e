//! Binary weights file.
//!
//! Little-endian layout:
//!
//! ```text
//! header  "TSAW" | version u32 | spec descriptor
//!         spec = in_channels, stem_channels, stem_kernel, stem_stride,
//!                input_resolution, blocks_per_stage, n_stages (u32 each),
//!                then n_stages u32 stage widths
//! body    record_count u32, then per record:
//!         name_len u32 | name utf-8 | dtype u8 | rank u32 | extents u32 x rank
//!         | row-major payload
//! trailer CRC32 (IEEE) of the body bytes
//! ```
//!
//! Only dtype 1 (f64) is written. Per-domain pretraining heads are never
//! stored.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use tsa_tensor::Tensor;

use super::{BackboneSpec, BackboneWeights};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSAW";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes the meta-test view of `weights` (heads excluded).
pub fn write_weights(weights: &BackboneWeights, out: &mut impl Write) -> Result<()> {
    weights.check_shapes()?;
    let spec = &weights.spec;
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        spec.in_channels,
        spec.stem_channels,
        spec.stem_kernel,
        spec.stem_stride,
        spec.input_resolution,
        spec.blocks_per_stage,
        spec.stage_channels.len(),
    ] {
        put_u32(&mut header, v)?;
    }
    for &c in &spec.stage_channels {
        put_u32(&mut header, c)?;
    }

    let mut body = Vec::new();
    put_u32(&mut body, weights.tensors.len())?;
    for (name, t) in &weights.tensors {
        put_u32(&mut body, name.len())?;
        body.extend_from_slice(name.as_bytes());
        body.push(DTYPE_F64);
        put_u32(&mut body, t.rank())?;
        for &e in t.shape() {
            put_u32(&mut body, e)?;
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    out.write_all(&header)?;
    out.write_all(&body)?;
    out.write_all(&crc.to_le_bytes())?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn read_weights(input: &mut impl Read) -> Result<BackboneWeights> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a TSAW weights file".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported version {version} (reader handles {FORMAT_VERSION})"
        )));
    }
    let in_channels = cur.u32()?;
    let stem_channels = cur.u32()?;
    let stem_kernel = cur.u32()?;
    let stem_stride = cur.u32()?;
    let input_resolution = cur.u32()?;
    let blocks_per_stage = cur.u32()?;
    let n_stages = cur.u32()?;
    if n_stages > 64 {
        return Err(Error::Format(format!("implausible stage count {n_stages}")));
    }
    let stage_channels = (0..n_stages).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    let spec = BackboneSpec {
        in_channels,
        stem_channels,
        stem_kernel,
        stem_stride,
        stage_channels,
        blocks_per_stage,
        input_resolution,
    };
    spec.validate()
        .map_err(|e| Error::Format(format!("embedded spec invalid: {e}")))?;

    if buf.len() < cur.pos + 4 {
        return Err(Error::Format("truncated: missing body".into()));
    }
    let body_start = cur.pos;
    let body_end = buf.len() - 4;
    let stored_crc = u32::from_le_bytes(buf[body_end..].try_into().expect("4 bytes"));
    let mut body = Cursor {
        buf: &buf[..body_end],
        pos: body_start,
    };
    let count = body.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = body.u32()?;
        let name = std::str::from_utf8(body.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let dtype = body.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("tensor {name}: unsupported dtype tag {dtype}")));
        }
        let rank = body.u32()?;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name}: implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| body.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = body.take(n.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if body.pos != body_end {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            body_end - body.pos
        )));
    }
    let crc = crc32fast::hash(&buf[body_start..body_end]);
    if crc != stored_crc {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored_crc:08x}, computed {crc:08x}"
        )));
    }
    let weights = BackboneWeights {
        spec,
        tensors,
        heads: Vec::new(),
    };
    weights.check_shapes()?;
    Ok(weights)
}

pub fn export_weights(weights: &BackboneWeights, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(weights, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn import_weights(path: impl AsRef<Path>) -> Result<BackboneWeights> {
    let mut f = std::fs::File::open(path)?;
    read_weights(&mut f)
}
