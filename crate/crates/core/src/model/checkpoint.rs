//! Little-endian checkpoint codec.
//!
//! ```text
//! magic "XVWMCKPT" | u16 version
//! config: u16 image_size, patch_size, hidden_dim, layers, heads, mlp_ratio,
//!         freq_dim | u32 diffusion_steps | u8 context_len | u8 num_views |
//!         num_views x u8 view code
//! u64 step | u32 num_tensors
//! per tensor: u16 name_len | name (UTF-8) | u8 ndim | ndim x u32 dim | f32 data
//! u8 has_train_state, then if 1:
//!   u8 scheme | 5 x f64 (lr, beta1, beta2, eps, weight_decay) | u64 adam_step
//!   first moments, then second moments: per tensor u8 ndim, dims, f32 data
//!   rng: 32-byte seed | u64 stream | u128 word_pos
//!   16 x u64 exposure counters, index input_code * 4 + output_code
//! ```

use std::fs;
use std::path::Path;

use xvwm_tensor::{AdamW, AdamWConfig, Tensor};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Result, XvwmError};
use crate::sim::ViewId;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XVWMCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serializable state of a `ChaCha8Rng`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Everything besides parameters needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub scheme: u8,
    pub optimizer: AdamW<f32>,
    pub rng: RngState,
    pub exposure: [u64; 16],
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ModelParams<f32>,
    pub train: Option<TrainState>,
}

fn put_u16(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u16).to_le_bytes());
}

fn put_tensor_body(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let c = &ck.config;
    let mut out = Vec::with_capacity(64 + ck.params.num_scalars() * 4 * 3);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.image_size, c.patch_size, c.hidden_dim, c.layers, c.heads, c.mlp_ratio, c.freq_dim] {
        put_u16(&mut out, v);
    }
    out.extend_from_slice(&(c.diffusion_steps as u32).to_le_bytes());
    out.push(c.context_len as u8);
    out.push(c.views.len() as u8);
    out.extend(c.views.iter().map(|v| v.code()));
    out.extend_from_slice(&ck.step.to_le_bytes());
    out.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in ck.params.names().iter().zip(&ck.params.tensors) {
        put_u16(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_tensor_body(&mut out, t);
    }
    match &ck.train {
        None => out.push(0),
        Some(ts) => {
            out.push(1);
            out.push(ts.scheme);
            let a = &ts.optimizer.config;
            for v in [a.lr, a.beta1, a.beta2, a.eps, a.weight_decay] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&ts.optimizer.step.to_le_bytes());
            for t in ts.optimizer.m.iter().chain(&ts.optimizer.v) {
                put_tensor_body(&mut out, t);
            }
            out.extend_from_slice(&ts.rng.seed);
            out.extend_from_slice(&ts.rng.stream.to_le_bytes());
            out.extend_from_slice(&ts.rng.word_pos.to_le_bytes());
            for e in ts.exposure {
                out.extend_from_slice(&e.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(XvwmError::format(field, format!("truncated at offset {}", self.pos))),
        }
    }

    fn arr<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<usize> {
        Ok(u16::from_le_bytes(self.arr(field)?) as usize)
    }

    fn u32(&mut self, field: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.arr(field)?) as usize)
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr(field)?))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr(field)?))
    }

    fn tensor(&mut self, field: &'static str) -> Result<Tensor<f32>> {
        let nd = self.u8(field)? as usize;
        let mut shape = Vec::with_capacity(nd);
        let mut numel: usize = 1;
        for _ in 0..nd {
            let d = self.u32(field)?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| XvwmError::format(field, "tensor size overflows"))?;
            shape.push(d);
        }
        let bytes = self.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| XvwmError::format(field, "tensor size overflows"))?,
            field,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::new(&shape, data)?)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(XvwmError::format("magic", "not a checkpoint file"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(XvwmError::format("version", format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u16("config")?;
    }
    let diffusion_steps = r.u32("config")?;
    let context_len = r.u8("config")? as usize;
    let nv = r.u8("config")? as usize;
    let mut views = Vec::with_capacity(nv);
    for _ in 0..nv {
        let code = r.u8("config")?;
        views.push(
            ViewId::from_code(code)
                .ok_or_else(|| XvwmError::format("config", format!("unknown view code {code}")))?,
        );
    }
    let config = ModelConfig {
        image_size: dims[0],
        patch_size: dims[1],
        hidden_dim: dims[2],
        layers: dims[3],
        heads: dims[4],
        mlp_ratio: dims[5],
        freq_dim: dims[6],
        diffusion_steps,
        context_len,
        views,
    };
    config
        .validate()
        .map_err(|e| XvwmError::format("config", e.to_string()))?;
    let step = r.u64("step")?;
    let count = r.u32("num_tensors")?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u16("tensor_name")?;
        let name = std::str::from_utf8(r.take(len, "tensor_name")?)
            .map_err(|_| XvwmError::format("tensor_name", "not UTF-8"))?
            .to_string();
        tensors.push(r.tensor("tensor_data")?);
        names.push(name);
    }
    let params = ModelParams::from_parts(names, tensors);
    params
        .check_layout(&config)
        .map_err(|e| XvwmError::format("tensor_data", e.to_string()))?;

    let train = match r.u8("has_train_state")? {
        0 => None,
        1 => {
            let scheme = r.u8("train_state")?;
            let config = AdamWConfig {
                lr: r.f64("train_state")?,
                beta1: r.f64("train_state")?,
                beta2: r.f64("train_state")?,
                eps: r.f64("train_state")?,
                weight_decay: r.f64("train_state")?,
            };
            let step = r.u64("train_state")?;
            let mut moments = Vec::with_capacity(2 * params.len());
            for i in 0..2 * params.len() {
                let t = r.tensor("optimizer_moments")?;
                if t.shape() != params.tensors[i % params.len()].shape() {
                    return Err(XvwmError::format("optimizer_moments", "moment shape differs from parameter"));
                }
                moments.push(t);
            }
            let v = moments.split_off(params.len());
            let rng = RngState {
                seed: r.arr("rng")?,
                stream: r.u64("rng")?,
                word_pos: u128::from_le_bytes(r.arr("rng")?),
            };
            let mut exposure = [0u64; 16];
            for e in exposure.iter_mut() {
                *e = r.u64("exposure")?;
            }
            Some(TrainState {
                scheme,
                optimizer: AdamW {
                    config,
                    step,
                    m: moments,
                    v,
                },
                rng,
                exposure,
            })
        }
        other => {
            return Err(XvwmError::format("has_train_state", format!("flag {other}")));
        }
    };
    if r.pos != bytes.len() {
        return Err(XvwmError::format("trailing", format!("{} unexpected bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        config,
        step,
        params,
        train,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(ck))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load and, when `expected` is given, require an identical model config.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let ck = decode_checkpoint(&fs::read(path)?)?;
    if let Some(exp) = expected {
        let diff = exp.diff(&ck.config);
        if !diff.is_empty() {
            return Err(XvwmError::Config(format!(
                "checkpoint config differs (expected vs file): {}",
                diff.join("; ")
            )));
        }
    }
    Ok(ck)
}
