//! Versioned binary checkpoints.
//!
//! ```text
//! "DFCK" | u32 version
//! config:    u32 layers, hidden, heads, ff_inner, max_len, vocab_size,
//!            segments, tag_classes, pair_classes | f64 dropout
//! tensors:   u32 count, then per tensor
//!            u32 name_len | name | u8 dtype (0 = f32) | u32 rank |
//!            u64 dims[rank] | little-endian values
//! optimizer: u8 present | u64 step | first moments | second moments
//!            (tensor blocks, same order as the parameters)
//! metadata:  u32 epoch | u64 seed | u8 task | u64 vocab fingerprint |
//!            u8 clipped | f64 clip_norm | u32 n | f64 losses[n]
//! ```
//!
//! All integers and floats are little-endian.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::model::{ModelConfig, ModelParameters};
use crate::numerics::Tensor;
use crate::trainer::OptimizerState;

pub const MAGIC: &[u8; 4] = b"DFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

type Result<T> = core::result::Result<T, CheckpointError>;

/// What a checkpoint was trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingTask {
    Multi,
    Tagging,
    Classification,
    Finetune,
}

impl TrainingTask {
    pub const ALL: [TrainingTask; 4] =
        [TrainingTask::Multi, TrainingTask::Tagging, TrainingTask::Classification, TrainingTask::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            TrainingTask::Multi => "multi",
            TrainingTask::Tagging => "tagging",
            TrainingTask::Classification => "classification",
            TrainingTask::Finetune => "finetune",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    /// Epochs completed (for fine-tuning: the selected epoch).
    pub epoch: u32,
    pub seed: u64,
    pub task: TrainingTask,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    pub vocab_fingerprint: u64,
    /// Gradient-norm ceiling used during training, if any.
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParameters<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn new(params: ModelParameters<f32>, optimizer: Option<OptimizerState<f32>>, metadata: Metadata) -> Self {
        Checkpoint { version: CHECKPOINT_VERSION, params, optimizer, metadata }
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, self.version);
        let c = self.params.config();
        for v in [
            c.layers,
            c.hidden,
            c.heads,
            c.ff_inner,
            c.max_len,
            c.vocab_size,
            c.segments,
            c.tag_classes,
            c.pair_classes,
        ] {
            put_u32(&mut w, v as u32);
        }
        put_f64(&mut w, c.dropout);
        put_u32(&mut w, self.params.len() as u32);
        for (name, t) in self.params.named() {
            put_tensor(&mut w, name, t);
        }
        match &self.optimizer {
            None => w.push(0),
            Some(state) => {
                w.push(1);
                put_u64(&mut w, state.step);
                for (moments, prefix) in [(&state.m, "m."), (&state.v, "v.")] {
                    for (name, t) in self.params.names().iter().zip(moments) {
                        put_tensor(&mut w, &format!("{prefix}{name}"), t);
                    }
                }
            }
        }
        let m = &self.metadata;
        put_u32(&mut w, m.epoch);
        put_u64(&mut w, m.seed);
        w.push(m.task.code());
        put_u64(&mut w, m.vocab_fingerprint);
        w.push(u8::from(m.clip_norm.is_some()));
        put_f64(&mut w, m.clip_norm.unwrap_or(0.0));
        put_u32(&mut w, m.loss_history.len() as u32);
        for &l in &m.loss_history {
            put_f64(&mut w, l);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let mut dims = [0usize; 9];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let [layers, hidden, heads, ff_inner, max_len, vocab_size, segments, tag_classes, pair_classes] = dims;
        let dropout = r.f64()?;
        let config = ModelConfig {
            layers,
            hidden,
            heads,
            ff_inner,
            dropout,
            max_len,
            vocab_size,
            segments,
            tag_classes,
            pair_classes,
        };
        config.validate().map_err(|e| corrupt(&e.to_string()))?;
        let count = r.u32()? as usize;
        if count > config.parameter_shapes(true).len() {
            return Err(corrupt("too many tensors"));
        }
        let named = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let params = ModelParameters::from_named(&config, named).map_err(|e| corrupt(&e.to_string()))?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut moments = [Vec::new(), Vec::new()];
                for (moment, prefix) in moments.iter_mut().zip(["m.", "v."]) {
                    for (name, p) in params.named() {
                        let (got, t) = r.tensor()?;
                        if got.strip_prefix(prefix) != Some(name) || t.shape() != p.shape() {
                            return Err(corrupt(&format!("optimizer tensor {got} does not match {name}")));
                        }
                        moment.push(t);
                    }
                }
                let [m, v] = moments;
                Some(OptimizerState { step, m, v })
            }
            _ => return Err(corrupt("bad optimizer flag")),
        };
        let epoch = r.u32()?;
        let seed = r.u64()?;
        let task = TrainingTask::ALL.get(r.u8()? as usize).copied().ok_or_else(|| corrupt("bad task"))?;
        let vocab_fingerprint = r.u64()?;
        let clipped = r.u8()?;
        let clip = r.f64()?;
        let clip_norm = match clipped {
            0 => None,
            1 => Some(clip),
            _ => return Err(corrupt("bad clip flag")),
        };
        let n = r.u32()? as usize;
        if n > r.remaining() / 8 {
            return Err(corrupt("loss history overruns the file"));
        }
        let loss_history = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        let metadata = Metadata { epoch, seed, task, loss_history, vocab_fingerprint, clip_norm };
        Ok(Checkpoint { version, params, optimizer, metadata })
    }
}

fn corrupt(msg: &str) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(w: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(w, name.len() as u32);
    w.extend_from_slice(name.as_bytes());
    w.push(DTYPE_F32);
    put_u32(w, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(w, d as u64);
    }
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(corrupt("unexpected end of file"));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = core::str::from_utf8(self.take(len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?.into();
        if self.u8()? != DTYPE_F32 {
            return Err(corrupt("unsupported dtype"));
        }
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt("tensor rank too large"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?).map_err(|_| corrupt("dimension overflow"))?;
            n = n.checked_mul(d).ok_or_else(|| corrupt("dimension overflow"))?;
            shape.push(d);
        }
        if n > self.remaining() / 4 {
            return Err(corrupt("tensor data overruns the file"));
        }
        let data = self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
        Ok((name, t))
    }
}
