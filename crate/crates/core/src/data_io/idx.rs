use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err<T>(file: &Path, offset: usize, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        msg: format!("{}: {msg}", file.display()),
    })
}

fn be_u32(bytes: &[u8], offset: usize, file: &Path) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes(b.try_into().expect("4 bytes"))),
        None => format_err(file, bytes.len(), "truncated header"),
    }
}

fn check_magic(bytes: &[u8], want: u32, file: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != want {
        return format_err(file, 0, format!("bad magic {magic:#010x}, expected {want:#010x}"));
    }
    Ok(())
}

/// Reads an IDX image file (`0x00000803`, `[n, rows, cols]` u8) and its label
/// file (`0x00000801`, `[n]` u8). Pixels are scaled to `[0, 1]`; the class
/// count is one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = std::fs::read(images)?;
    let lab = std::fs::read(labels)?;

    check_magic(&img, IMAGES_MAGIC, images)?;
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let d = rows * cols;
    let need = 16 + n * d;
    if img.len() < need {
        return format_err(images, img.len(), format!("truncated pixel data, expected {need} bytes"));
    }

    check_magic(&lab, LABELS_MAGIC, labels)?;
    let n_lab = be_u32(&lab, 4, labels)? as usize;
    if n_lab != n {
        return format_err(labels, 4, format!("{n_lab} labels for {n} images"));
    }
    if lab.len() < 8 + n {
        return format_err(labels, lab.len(), format!("truncated label data, expected {} bytes", 8 + n));
    }

    let pixels: Vec<f64> = img[16..need].iter().map(|&p| p as f64 / 255.0).collect();
    let ys: Vec<usize> = lab[8..8 + n].iter().map(|&y| y as usize).collect();
    let classes = ys.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, d], pixels)?, ys, classes, Split::Train)
}

/// Writes u8 images `[n, rows, cols]` and labels in IDX format.
pub fn write_idx(images: &Path, labels: &Path, rows: usize, cols: usize, pixels: &[u8], ys: &[u8]) -> Result<()> {
    let n = ys.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::Argument(format!(
            "{} pixels do not make {n} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(ys);
    std::fs::write(images, img)?;
    std::fs::write(labels, lab)?;
    Ok(())
}
