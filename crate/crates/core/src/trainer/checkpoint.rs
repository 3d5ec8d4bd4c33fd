//! Binary checkpoints (`.adlj`).
//!
//! Layout, all integers little-endian:
//! magic `ADLJEPA1`, u32 version, u32-prefixed config text, u64 step,
//! u64 dataset length, u64 RNG seed, u64 RNG counter, f64 η, u64 Adam step,
//! u32 tensor count, then per tensor a u32-prefixed name, u32 rank, u64 dims
//! and f64 data.
//!
//! Every random draw is keyed by `(seed, counter-derived tuple)`, so the
//! seed and step counter are the entire RNG state.

use std::path::Path;

use adljepa_autodiff::{Adam, Tensor};

use super::{adam_config, TrainConfig, Trainer};
use crate::config::{render, KvConfig};
use crate::model::ModelState;
use crate::{CoreError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADLJEPA1";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> CoreError {
        CoreError::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CoreError::Format {
            path: self.path.clone(),
            offset: at as u64,
            detail: "invalid UTF-8".into(),
        })
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.err(format!("tensor '{name}' has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if n.checked_mul(8).map_or(true, |b| b > self.buf.len() - self.pos) {
            return Err(self.err(format!("truncated: tensor '{name}' needs {n} values")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn checkpoint_bytes(trainer: &Trainer) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(render(&trainer.config.entries()).as_bytes());
    w.u64(trainer.step);
    w.u64(trainer.dataset_len as u64);
    w.u64(trainer.config.seed);
    w.u64(trainer.step);
    w.f64(trainer.model.eta);
    w.u64(trainer.optimizer.step_count());
    let names = trainer.model.trainable_names();
    let params = trainer.model.trainable();
    let tnames = trainer.model.target_names();
    let targets = trainer.model.target_tensors();
    let count = names.len() * 3 + tnames.len();
    w.u32(count as u32);
    for (n, t) in names.iter().zip(&params) {
        w.tensor(n, t);
    }
    for (n, t) in tnames.iter().zip(&targets) {
        w.tensor(n, t);
    }
    for (n, t) in names.iter().zip(trainer.optimizer.first_moments()) {
        w.tensor(&format!("adam.m.{n}"), t);
    }
    for (n, t) in names.iter().zip(trainer.optimizer.second_moments()) {
        w.tensor(&format!("adam.v.{n}"), t);
    }
    w.0
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let tmp = path.with_extension("adlj.tmp");
    std::fs::write(&tmp, checkpoint_bytes(trainer)).map_err(|e| CoreError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

pub fn parse_checkpoint(buf: &[u8], source: &str) -> Result<Trainer> {
    let mut r = Reader {
        buf,
        pos: 0,
        path: source.to_string(),
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic; not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let cfg_text = r.string()?;
    let config = TrainConfig::from_kv_text(&cfg_text, &format!("{source} (embedded config)"))?;
    let step = r.u64()?;
    let dataset_len = r.u64()? as usize;
    let rng_seed = r.u64()?;
    let rng_counter = r.u64()?;
    if rng_seed != config.seed || rng_counter != step {
        return Err(r.err("RNG key disagrees with config seed or step"));
    }
    let eta = r.f64()?;
    let adam_t = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            r.pos = at;
            return Err(r.err(format!("duplicate tensor '{name}'")));
        }
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last tensor"));
    }

    let mut model = ModelState::init(config.model.clone(), config.seed, eta)?;
    model.eta = eta;
    let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| CoreError::Format {
                path: source.to_string(),
                offset: 0,
                detail: format!("missing tensor '{name}'"),
            })?;
        if t.shape() != like.shape() {
            return Err(CoreError::Shape(format!(
                "checkpoint tensor '{name}' is {:?}, config implies {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    };
    let names = model.trainable_names();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (n, p) in names.iter().zip(model.trainable_mut()) {
        *p = take(n, p)?;
        m.push(take(&format!("adam.m.{n}"), p)?);
        v.push(take(&format!("adam.v.{n}"), p)?);
    }
    for (n, p) in model.target_names().iter().zip(model.target_tensors_mut()) {
        *p = take(n, p)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(CoreError::Format {
            path: source.to_string(),
            offset: 0,
            detail: format!("unexpected tensor '{extra}'"),
        });
    }
    let optimizer = Adam::from_parts(adam_config(&config, config.lr_peak), adam_t, m, v)?;
    let mut trainer = Trainer {
        config,
        model,
        optimizer,
        step,
        dataset_len,
    };
    if step > 0 {
        trainer.optimizer.config.lr = trainer.lr_schedule().at(step - 1, trainer.total_steps());
    }
    Ok(trainer)
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let buf = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    parse_checkpoint(&buf, &path.display().to_string())
}
