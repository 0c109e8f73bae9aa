//! Binary checkpoints.
//!
//! Layout: `"AALCKPT\0"`, `u32` version, then sections of
//! `u32 name_len | name (UTF-8) | u64 payload_len | payload | u32 crc32(payload)`.
//! All integers and floats are little-endian; tensors are stored as `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::CouplingHistory;
use crate::error::{Error, Result};
use crate::model::{ModelParams, SmallCnn, SmallCnnConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::train::TrainingState;

pub const MAGIC: &[u8; 8] = b"AALCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model: SmallCnnConfig,
    run: serde_json::Value,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SmallCnn<f32>,
    pub state: TrainingState<f32>,
    /// Configuration snapshot stored alongside the weights.
    pub run_config: serde_json::Value,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f32s(t.data());
    }
    fn section(&mut self, name: &str, payload: &[u8]) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u64(payload.len() as u64);
        self.0.extend_from_slice(payload);
        self.u32(crc32fast::hash(payload));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    section: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(malformed(format!("section {:?} ends early", self.section)));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| malformed("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed("tensor size overflow".into()))?;
        Tensor::from_vec(shape, self.f32s(len)?)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("non-UTF-8 name".into()))
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(malformed(format!("section {:?} has trailing bytes", self.section)))
        }
    }
}

fn malformed(detail: String) -> Error {
    Error::Malformed {
        path: "<checkpoint>".into(),
        detail,
    }
}

fn params_payload(params: &ModelParams<f32>, momentum: bool) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(params.len() as u32);
    for p in params.iter() {
        w.u32(p.name.len() as u32);
        w.0.extend_from_slice(p.name.as_bytes());
        w.tensor(if momentum { &p.momentum } else { &p.value });
    }
    w.0
}

fn read_named_tensors(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor<f32>)>> {
    let n = r.u32()? as usize;
    let out = (0..n)
        .map(|_| Ok((r.string()?, r.tensor()?)))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(out)
}

/// Serializes a model and its training state.
pub fn encode_checkpoint(
    model: &SmallCnn<f32>,
    state: &TrainingState<f32>,
    run_config: &serde_json::Value,
) -> Result<Vec<u8>> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION);

    let meta = serde_json::to_vec(&Meta {
        model: model.config().clone(),
        run: run_config.clone(),
    })?;
    w.section("config", &meta);
    w.section("params", &params_payload(model.params(), false));
    w.section("momentum", &params_payload(model.params(), true));

    let (mean, std) = model.normalization();
    let mut p = Writer(Vec::new());
    p.u32(mean.len() as u32);
    p.f32s(mean);
    p.f32s(std);
    w.section("normalization", &p.0);

    let mut p = Writer(Vec::new());
    p.0.extend_from_slice(&state.rng.seed);
    p.u64(state.rng.stream);
    p.0.extend_from_slice(&state.rng.word_pos.to_le_bytes());
    w.section("rng", &p.0);

    let mut p = Writer(Vec::new());
    p.u64(state.epoch as u64);
    p.u64(state.step as u64);
    w.section("progress", &p.0);

    let mut p = Writer(Vec::new());
    match &state.history {
        None => p.0.push(0),
        Some(h) => {
            p.0.push(1);
            p.tensor(&h.prev_m);
            p.tensor(&h.prev_delta);
        }
    }
    w.section("history", &p.0);
    Ok(w.0)
}

/// Parses bytes produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let mut r = Reader {
        buf: &bytes[MAGIC.len()..],
        section: "header",
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let mut sections: Vec<(String, &[u8])> = Vec::new();
    while !r.buf.is_empty() {
        let name = r.string()?;
        let len = usize::try_from(r.u64()?).map_err(|_| malformed("section too large".into()))?;
        let payload = r.take(len)?;
        let crc = r.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checksum { section: name });
        }
        sections.push((name, payload));
    }
    let get = |name: &'static str| -> Result<Reader<'_>> {
        sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, buf)| Reader { buf, section: name })
            .ok_or_else(|| Error::MissingSection(name.into()))
    };

    let meta: Meta = serde_json::from_slice(get("config")?.buf)?;
    let values = read_named_tensors(&mut get("params")?)?;
    let momenta = read_named_tensors(&mut get("momentum")?)?;
    if values.len() != momenta.len() {
        return Err(malformed("parameter and momentum counts differ".into()));
    }
    let mut params = ModelParams::new();
    for ((name, value), (mname, mom)) in values.into_iter().zip(momenta) {
        if name != mname || value.shape() != mom.shape() {
            return Err(malformed(format!("momentum for {name:?} does not match")));
        }
        params.insert(name.clone(), value)?;
        params.get_mut(&name).expect("just inserted").momentum = mom;
    }

    let mut r = get("normalization")?;
    let c = r.u32()? as usize;
    let mean = r.f32s(c)?;
    let std = r.f32s(c)?;
    r.finish()?;
    let model = SmallCnn::from_parts(meta.model, params, mean, std)?;

    let mut r = get("rng")?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    r.finish()?;

    let mut r = get("progress")?;
    let epoch = r.u64()? as usize;
    let step = r.u64()? as usize;
    r.finish()?;

    let mut r = get("history")?;
    let history = match r.u8()? {
        0 => None,
        1 => Some(CouplingHistory {
            prev_m: r.tensor()?,
            prev_delta: r.tensor()?,
        }),
        other => return Err(malformed(format!("history tag {other}"))),
    };
    r.finish()?;

    Ok(Checkpoint {
        model,
        state: TrainingState {
            epoch,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            history,
        },
        run_config: meta.run,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &SmallCnn<f32>,
    state: &TrainingState<f32>,
    run_config: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, state, run_config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Malformed { detail, .. } => Error::Malformed {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    })
}
