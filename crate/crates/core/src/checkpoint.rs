//! Versioned binary checkpoints: model layers, parameters, momentum buffers,
//! and schedule position, with a trailing content checksum. Round trips are
//! bit-exact.

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerKind, LayeredModel, Param};
use crate::optim::SgdState;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FGLB";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub model: LayeredModel,
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Vec<f64>>,
    /// Completed generations.
    pub generations_done: u32,
    /// Next global epoch to run.
    pub next_epoch: u32,
}

impl Checkpoint {
    /// Rebuild the optimizer state, buffers aligned with ParamId order.
    pub fn sgd_state(&self) -> Result<SgdState> {
        let mut state = SgdState::new(&self.model, self.momentum, self.weight_decay);
        let ids = self.model.param_ids();
        if ids.len() != self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "{} momentum buffers for {} parameters",
                self.buffers.len(),
                ids.len()
            )));
        }
        for (id, buf) in ids.into_iter().zip(&self.buffers) {
            let dst = state
                .buffer_mut(id)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer slot for {id}")))?;
            if dst.len() != buf.len() {
                return Err(Error::Checkpoint(format!(
                    "buffer for {id} has {} values, parameter has {}",
                    buf.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(buf);
        }
        Ok(state)
    }
}

struct Encoder {
    bytes: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Encoder { bytes: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
    fn shape(&mut self, s: &[usize]) {
        self.u8(s.len() as u8);
        for &d in s {
            self.u32(d as u32);
        }
    }
}

struct Decoder<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Decoder<'a> {
    fn need(&self, n: usize) -> Result<()> {
        if self.at + n > self.bytes.len() {
            Err(Error::Checkpoint(format!(
                "truncated payload at byte {} (need {n} more bytes)",
                self.at
            )))
        } else {
            Ok(())
        }
    }
    fn u8(&mut self) -> Result<u8> {
        self.need(1)?;
        let v = self.bytes[self.at];
        self.at += 1;
        Ok(v)
    }
    fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.bytes[self.at..self.at + 4].try_into().unwrap());
        self.at += 4;
        Ok(v)
    }
    fn u64(&mut self) -> Result<u64> {
        self.need(8)?;
        let v = u64::from_le_bytes(self.bytes[self.at..self.at + 8].try_into().unwrap());
        self.at += 8;
        Ok(v)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.need(n)?;
        let s = std::str::from_utf8(&self.bytes[self.at..self.at + n])
            .map_err(|_| Error::Checkpoint(format!("invalid utf-8 string at byte {}", self.at)))?
            .to_string();
        self.at += n;
        Ok(s)
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        self.need(n * 8)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
    fn shape(&mut self) -> Result<Vec<usize>> {
        let n = self.u8()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.u32()? as usize);
        }
        Ok(out)
    }
}

fn kind_code(kind: LayerKind) -> (u8, u8) {
    match kind {
        LayerKind::Linear { relu } => (0, relu as u8),
        LayerKind::Conv2dBlock { pool } => (1, pool as u8),
        LayerKind::NormAffine => (2, 0),
        LayerKind::ClassifierHead => (3, 0),
    }
}

fn kind_of(code: u8, flag: u8) -> Result<LayerKind> {
    match code {
        0 => Ok(LayerKind::Linear { relu: flag != 0 }),
        1 => Ok(LayerKind::Conv2dBlock { pool: flag != 0 }),
        2 => Ok(LayerKind::NormAffine),
        3 => Ok(LayerKind::ClassifierHead),
        other => Err(Error::Checkpoint(format!("unknown layer kind code {other}"))),
    }
}

/// Serialize model, optimizer buffers, and schedule position.
pub fn save_checkpoint(
    model: &LayeredModel,
    sgd: &SgdState,
    generations_done: u32,
    next_epoch: u32,
    path: &Path,
) -> Result<()> {
    let mut enc = Encoder::new();
    enc.u32(generations_done);
    enc.u32(next_epoch);
    enc.shape(&model.input_shape);
    enc.u32(model.layers.len() as u32);
    for layer in &model.layers {
        enc.str(&layer.name);
        let (code, flag) = kind_code(layer.kind);
        enc.u8(code);
        enc.u8(flag);
        enc.u8(layer.probe_point as u8);
        enc.u32(layer.params.len() as u32);
        for p in &layer.params {
            enc.str(&p.name);
            enc.u8(p.frozen as u8);
            enc.shape(p.value.shape());
            enc.floats(p.value.data());
        }
    }
    enc.f64(sgd.momentum);
    enc.f64(sgd.weight_decay);
    let ids = model.param_ids();
    enc.u32(ids.len() as u32);
    for id in ids {
        let buf = sgd
            .buffer(id)
            .ok_or_else(|| Error::Checkpoint(format!("missing momentum buffer for {id}")))?;
        enc.floats(buf);
    }

    let payload = enc.bytes;
    let mut hasher = Sha256::new();
    hasher.update(&payload);
    let digest = hasher.finalize();

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(payload.len() as u64).to_le_bytes())?;
    file.write_all(&payload)?;
    file.write_all(&digest)?;
    Ok(())
}

/// Load and verify a checkpoint. Version mismatches, truncation, and
/// checksum failures are explicit errors; no partial model is returned.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!(
            "{}: file too short for header",
            path.display()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version}, this build reads version {VERSION}",
            path.display()
        )));
    }
    let payload_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected_total = 16 + payload_len + 32;
    if bytes.len() != expected_total {
        return Err(Error::Checkpoint(format!(
            "{}: expected {expected_total} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let payload = &bytes[16..16 + payload_len];
    let stored = &bytes[16 + payload_len..];
    let mut hasher = Sha256::new();
    hasher.update(payload);
    let digest = hasher.finalize();
    if digest.as_slice() != stored {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }

    let mut dec = Decoder { bytes: payload, at: 0 };
    let generations_done = dec.u32()?;
    let next_epoch = dec.u32()?;
    let input_shape = dec.shape()?;
    let layer_count = dec.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let name = dec.str()?;
        let code = dec.u8()?;
        let flag = dec.u8()?;
        let probe = dec.u8()? != 0;
        let kind = kind_of(code, flag)?;
        let param_count = dec.u32()? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            let pname = dec.str()?;
            let frozen = dec.u8()? != 0;
            let shape = dec.shape()?;
            let data = dec.floats()?;
            params.push(Param {
                name: pname,
                value: Tensor::new(shape, data)
                    .map_err(|e| Error::Checkpoint(format!("bad parameter tensor: {e}")))?,
                frozen,
            });
        }
        layers.push(Layer {
            name,
            kind,
            params,
            probe_point: probe,
        });
    }
    let momentum = dec.f64()?;
    let weight_decay = dec.f64()?;
    let buffer_count = dec.u32()? as usize;
    let mut buffers = Vec::with_capacity(buffer_count);
    for _ in 0..buffer_count {
        buffers.push(dec.floats()?);
    }
    if dec.at != payload.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} unread payload bytes",
            path.display(),
            payload.len() - dec.at
        )));
    }
    let model = LayeredModel::new(layers, input_shape)
        .map_err(|e| Error::Checkpoint(format!("invalid model in checkpoint: {e}")))?;
    Ok(Checkpoint {
        model,
        momentum,
        weight_decay,
        buffers,
        generations_done,
        next_epoch,
    })
}
