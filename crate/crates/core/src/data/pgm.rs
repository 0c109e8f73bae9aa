//! Binary greyscale (P5) export of attention maps.

use std::path::{Path, PathBuf};

use crate::attention::AttentionState;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `"P5\n{w} {h}\n255\n"` followed by `round(255·v)` per value, rounding
/// halves up. Values are saturated to `[0, 1]` first.
pub fn encode_pgm<T: Scalar>(values: &[T], width: usize, height: usize) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::shape(
            "encode_pgm",
            format!("{} values for a {width}x{height} image", values.len()),
        ));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        let v = v.to_f64();
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (255.0 * v + 0.5).floor() as u8
    }));
    Ok(out)
}

/// Writes one `[N, 1, H, W]` map as `{index}_{tag}.pgm` per sample.
pub fn write_map_pgm<T: Scalar>(map: &Tensor<T>, tag: &str, dir: &Path, first_index: usize) -> Result<Vec<PathBuf>> {
    let [n, c, h, w] = map.dims4("write_map_pgm")?;
    if c != 1 {
        return Err(Error::shape("write_map_pgm", format!("expected one channel, got {c}")));
    }
    (0..n)
        .map(|s| {
            let path = dir.join(format!("{}_{tag}.pgm", first_index + s));
            let bytes = encode_pgm(&map.data()[s * h * w..][..h * w], w, h)?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Writes `M`, `M̂` and `Mᵃ` for every sample of `state` into `dir`, as
/// `{index}_M.pgm`, `{index}_Mhat.pgm`, `{index}_Massoc.pgm`.
///
/// Returns the written paths grouped by sample.
pub fn dump_attention_pgm<T: Scalar>(state: &AttentionState<T>, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let maps = [("M", &state.m), ("Mhat", &state.m_hat), ("Massoc", &state.m_assoc)];
    let mut per_kind = Vec::with_capacity(3);
    for (tag, map) in maps {
        per_kind.push(write_map_pgm(map, tag, dir, 0)?);
    }
    let n = per_kind[0].len();
    Ok((0..n).flat_map(|s| per_kind.iter().map(move |k| k[s].clone())).collect())
}
