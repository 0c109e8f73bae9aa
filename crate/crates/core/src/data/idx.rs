//! MNIST IDX files (`idx3-ubyte` images, `idx1-ubyte` labels), optionally
//! gzip-compressed.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

const MNIST_CLASSES: usize = 10;

/// Reads a file, transparently inflating gzip content.
pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], path: &Path, magic: u32, ndim: usize) -> Result<(Vec<usize>, usize)> {
    let header_len = 4 + 4 * ndim;
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    let found = word(0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim).map(|d| word(4 + 4 * d) as usize).collect();
    let payload = dims.iter().product::<usize>();
    let expected = header_len + payload;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    Ok((dims, header_len))
}

/// Parses an image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (dims, off) = header(bytes, path, IMAGES_MAGIC, 3)?;
    Ok((dims[0], dims[1], dims[2], bytes[off..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let (_, off) = header(bytes, path, LABELS_MAGIC, 1)?;
    Ok(bytes[off..].to_vec())
}

/// Loads an MNIST-style image/label pair into a [`Dataset`] with pixels
/// scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(ip)?, ip)?;
    let labels = parse_idx_labels(&read_maybe_gz(lp)?, lp)?;
    mnist_from_parts(n, rows, cols, &pixels, &labels, ip, split)
}

pub(crate) fn mnist_from_parts(
    n: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
    path: &Path,
    split: Split,
) -> Result<Dataset> {
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if rows != cols {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("images must be square, got {rows}x{cols}"),
        });
    }
    let images = Tensor::from_vec([n, 1, rows, cols], pixels.iter().map(|&b| b as f32 / 255.0).collect())?;
    let labels = labels.iter().map(|&l| l as usize).collect();
    Dataset::new(images, labels, MNIST_CLASSES, split)
}
