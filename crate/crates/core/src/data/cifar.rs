//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 3072 channel-major (R, G, B) row-major 32x32 pixel bytes.

use std::path::Path;

use super::dataset::{Dataset, Split};
use super::idx::read_maybe_gz;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_LEN: usize = 3073;
const SIDE: usize = 32;
const CLASSES: usize = 10;

pub fn parse_cifar10(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("length {} is not a multiple of {RECORD_LEN}", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD_LEN - 1));
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("record {i} has label byte {}", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::from_vec([n, 3, SIDE, SIDE], pixels)?;
    Dataset::new(images, labels, CLASSES, split)
}

/// Loads one CIFAR-10 binary batch file (optionally gzip-compressed).
pub fn load_cifar10_bin(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    parse_cifar10(&read_maybe_gz(path)?, path, split)
}
