//! Binary checkpoint format with bit-exact round trips, including optimizer
//! and RNG state so a resumed run matches an uninterrupted one.

use crate::autodiff::{AdamWState, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"ENCLAPDS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("checkpoint holds model kind {found:?}, expected {expected:?}")]
    KindMismatch { found: String, expected: String },
    #[error("invalid utf-8 in {what}")]
    BadString { what: &'static str },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Serializable ChaCha8 RNG position.
#[derive(Debug, Clone, PartialEq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngSnapshot {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Full training snapshot. `tensors` holds model parameters plus any
/// auxiliary arrays (codebooks, EMA state) in a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_text: String,
    pub vocab_words: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamWSnapshot>,
    pub rng: RngSnapshot,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWSnapshot {
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamWSnapshot {
    pub fn capture(state: &AdamWState) -> Self {
        AdamWSnapshot {
            step_count: state.step_count,
            beta1: state.beta1,
            beta2: state.beta2,
            weight_decay: state.weight_decay,
            epsilon: state.epsilon,
            first_moment: state.first_moment.clone(),
            second_moment: state.second_moment.clone(),
        }
    }

    pub fn restore(&self) -> AdamWState {
        AdamWState {
            step_count: self.step_count,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            epsilon: self.epsilon,
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated { what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u128(&mut self, what: &'static str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u64(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::BadString { what })
    }
    fn floats(&mut self, what: &'static str) -> Result<Vec<f64>> {
        let len = self.u64(what)? as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.f64(what)?);
        }
        Ok(out)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.string(&ckpt.kind);
    w.string(&ckpt.config_text);
    w.u64(ckpt.vocab_words.len() as u64);
    for word in &ckpt.vocab_words {
        w.string(word);
    }
    w.u64(ckpt.tensors.len() as u64);
    for (name, t) in &ckpt.tensors {
        w.string(name);
        w.u64(t.shape().len() as u64);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &x in t.data() {
            w.f64(x);
        }
    }
    match &ckpt.optimizer {
        None => w.buf.push(0),
        Some(o) => {
            w.buf.push(1);
            w.u64(o.step_count);
            w.f64(o.beta1);
            w.f64(o.beta2);
            w.f64(o.weight_decay);
            w.f64(o.epsilon);
            w.u64(o.first_moment.len() as u64);
            for (m, v) in o.first_moment.iter().zip(&o.second_moment) {
                w.floats(m);
                w.floats(v);
            }
        }
    }
    w.buf.extend_from_slice(&ckpt.rng.seed);
    w.u128(ckpt.rng.word_pos);
    w.u64(ckpt.rng.stream);
    w.u64(ckpt.step);

    let mut f = std::fs::File::create(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(&w.buf).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
    }
    let kind = r.string("kind")?;
    let config_text = r.string("config")?;
    let n_words = r.u64("vocab")? as usize;
    let mut vocab_words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        vocab_words.push(r.string("vocab word")?);
    }
    let n_tensors = r.u64("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.string("tensor name")?;
        let ndim = r.u64("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("tensor shape")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("tensor data")?);
        }
        let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated { what: "tensor" })?;
        tensors.push((name, t));
    }
    let optimizer = match r.take(1, "optimizer flag")?[0] {
        0 => None,
        _ => {
            let step_count = r.u64("optimizer")?;
            let beta1 = r.f64("optimizer")?;
            let beta2 = r.f64("optimizer")?;
            let weight_decay = r.f64("optimizer")?;
            let epsilon = r.f64("optimizer")?;
            let n = r.u64("optimizer")? as usize;
            let mut first_moment = Vec::with_capacity(n);
            let mut second_moment = Vec::with_capacity(n);
            for _ in 0..n {
                first_moment.push(r.floats("optimizer moment")?);
                second_moment.push(r.floats("optimizer moment")?);
            }
            Some(AdamWSnapshot {
                step_count,
                beta1,
                beta2,
                weight_decay,
                epsilon,
                first_moment,
                second_moment,
            })
        }
    };
    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let word_pos = r.u128("rng word pos")?;
    let stream = r.u64("rng stream")?;
    let step = r.u64("step")?;
    Ok(Checkpoint {
        kind,
        config_text,
        vocab_words,
        tensors,
        optimizer,
        rng: RngSnapshot { seed, word_pos, stream },
        step,
    })
}

/// Collects every parameter of a store as named tensors, in store order.
pub fn params_to_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Writes checkpoint tensors back over a freshly constructed store. Names
/// absent from the store are ignored so callers can carry extra arrays.
pub fn tensors_into_params(tensors: &[(String, Tensor)], store: &mut ParamStore) {
    for (name, t) in tensors {
        if let Some(id) = store.id(name) {
            *store.value_mut(id) = t.clone();
        }
    }
}

/// Hard gate that a loaded checkpoint matches the expected model kind.
pub fn expect_kind(ckpt: &Checkpoint, expected: &str) -> Result<()> {
    if ckpt.kind != expected {
        return Err(CheckpointError::KindMismatch {
            found: ckpt.kind.clone(),
            expected: expected.to_string(),
        });
    }
    Ok(())
}
