//! Big-endian IDX files (the MNIST container format).
//!
//! Images: magic `0x00000803`, then u32 count, rows, cols, then
//! `count * rows * cols` pixel bytes row-major. Labels: magic `0x00000801`,
//! u32 count, then `count` label bytes.

use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Parsed image file: `(count, rows, cols, pixels)`.
pub type IdxImages = (usize, usize, usize, Vec<u8>);

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Idx(format!("{what}: header truncated at byte {at}")))
}

fn check_magic(found: u32, want: u32, what: &str) -> Result<()> {
    if found == want {
        return Ok(());
    }
    let hint = match found {
        IDX_LABEL_MAGIC => " (this is a label file)",
        IDX_IMAGE_MAGIC => " (this is an image file)",
        _ => "",
    };
    Err(Error::Idx(format!(
        "{what}: wrong magic 0x{found:08x}, expected 0x{want:08x}{hint}"
    )))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(be_u32(bytes, 0, "images")?, IDX_IMAGE_MAGIC, "images")?;
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Idx("images: header dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::Idx(format!(
            "images: length mismatch, header declares {n}x{rows}x{cols} = {expected} bytes, payload has {}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(be_u32(bytes, 0, "labels")?, IDX_LABEL_MAGIC, "labels")?;
    let n = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Idx(format!(
            "labels: length mismatch, header declares {n} labels, payload has {} bytes",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

pub fn write_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let per = rows * cols;
    if per == 0 || pixels.len() % per != 0 {
        return Err(Error::Idx(format!(
            "{} pixel bytes do not form {rows}x{cols} images",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC as usize, pixels.len() / per, rows, cols] {
        let v = u32::try_from(v).map_err(|_| Error::Idx(format!("{v} exceeds u32")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let n = u32::try_from(labels.len()).map_err(|_| Error::Idx("too many labels".into()))?;
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&n.to_be_bytes());
    out.extend_from_slice(labels);
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Idx(format!("{}: {e}", path.display())))
}

/// Loads an image/label file pair as a single-channel dataset with pixels
/// scaled to `[0, 1]`. Every class is assigned to `split`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, name: &str, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(images.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels.as_ref())?)?;
    if labels.len() != n {
        return Err(Error::Idx(format!(
            "{name}: {n} images but {} labels",
            labels.len()
        )));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Dataset::new(
        name,
        0,
        false,
        (1, rows, cols),
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        vec![split; classes],
    )
}

/// Dataset root from the `TSA_DATA_DIR` environment variable.
pub fn data_root() -> Option<PathBuf> {
    std::env::var_os("TSA_DATA_DIR").map(PathBuf::from)
}

/// Loads `{root}/{name}/{file}-images.idx` and `{file}-labels.idx`, where
/// `file` is `train` or `test`.
pub fn load_idx_dir(root: impl AsRef<Path>, name: &str, file: &str, split: Split) -> Result<Dataset> {
    let dir = root.as_ref().join(name);
    load_idx(
        dir.join(format!("{file}-images.idx")),
        dir.join(format!("{file}-labels.idx")),
        name,
        split,
    )
}
