//! Big-endian IDX files (the MNIST container format).
//!
//! Images: magic `0x00000803`, then `n`, `rows`, `cols` as u32, then
//! `n * rows * cols` unsigned bytes. Labels: magic `0x00000801`, then `n`,
//! then `n` bytes.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header ends after {} bytes", bytes.len())))
}

/// Pixel bytes scaled to `[0, 1]`, plus `(rows, cols)`.
pub fn parse_images(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize, usize)> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Length(format!(
            "images: expected {need} pixel bytes, found {}",
            body.len()
        )));
    }
    let pixels = body[..need].iter().map(|b| *b as f64 / 255.0).collect();
    Ok((pixels, n, rows, cols))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Length(format!(
            "labels: expected {n} bytes, found {}",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|b| *b as usize).collect())
}

/// Reads an image file and its label file into one dataset of flattened
/// images.
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (pixels, n, rows, cols) = parse_images(&img)?;
    let ys = parse_labels(&lab)?;
    if ys.len() != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", ys.len())));
    }
    Dataset::new((rows * cols).max(1), pixels, ys)
}

/// Encodes images (bytes, row-major per image) and labels as an IDX pair.
pub fn encode_idx(pixels: &[u8], n: usize, rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}

pub fn write_idx(
    images: &Path,
    labels: &Path,
    pixels: &[u8],
    n: usize,
    rows: usize,
    cols: usize,
    ys: &[u8],
) -> Result<()> {
    let (img, lab) = encode_idx(pixels, n, rows, cols, ys);
    std::fs::write(images, img).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}
