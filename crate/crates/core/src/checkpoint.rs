//! Flat binary checkpoint: header with format version and config echo, named
//! parameter blocks, the memory bank, optimizer momentum, the epoch counter,
//! per-keyword error rates and the validation EER thresholds.
//!
//! All integers and floats are little-endian. Strings and blobs are prefixed
//! by a u64 byte length.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::corpus::Keyword;
use crate::error::{Error, Result};
use crate::memory_bank::{Cursor, MemoryBank};
use crate::model::{Mode, Model};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"PLCLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// EER thresholds measured on the validation split, per enrollment mode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Thresholds {
    pub text: Option<f64>,
    pub audio: Option<f64>,
    pub both: Option<f64>,
}

impl Thresholds {
    pub fn get(&self, mode: Mode) -> Option<f64> {
        match mode {
            Mode::Text => self.text,
            Mode::Audio => self.audio,
            Mode::Both => self.both,
        }
    }

    pub fn set(&mut self, mode: Mode, value: Option<f64>) {
        match mode {
            Mode::Text => self.text = value,
            Mode::Audio => self.audio = value,
            Mode::Both => self.both = value,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub inventory_checksum: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Momentum buffers in parameter order; empty before the first step.
    pub velocity: Vec<Tensor>,
    pub keyword_errors: BTreeMap<Keyword, f64>,
    pub thresholds: Thresholds,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn blob<'a>(cur: &mut Cursor<'a>) -> Result<&'a [u8]> {
    let n = cur.u64()? as usize;
    cur.take(n)
}

fn string(cur: &mut Cursor<'_>) -> Result<String> {
    String::from_utf8(blob(cur)?.to_vec()).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_blob(&mut out, self.model.cfg.to_toml().as_bytes());
        put_blob(&mut out, self.inventory_checksum.as_bytes());
        put_u64(&mut out, self.model.cfg.train.seed);
        put_u64(&mut out, self.epoch as u64);

        put_u64(&mut out, self.model.store.len() as u64);
        for (name, t) in self.model.store.iter() {
            put_blob(&mut out, name.as_bytes());
            put_u64(&mut out, t.rows() as u64);
            put_u64(&mut out, t.cols() as u64);
            for v in t.data() {
                put_f64(&mut out, *v);
            }
        }
        put_blob(&mut out, &self.model.bank.snapshot());
        put_u64(&mut out, self.velocity.len() as u64);
        for t in &self.velocity {
            put_u64(&mut out, t.rows() as u64);
            put_u64(&mut out, t.cols() as u64);
            for v in t.data() {
                put_f64(&mut out, *v);
            }
        }

        put_u64(&mut out, self.keyword_errors.len() as u64);
        for (kw, e) in &self.keyword_errors {
            put_u64(&mut out, kw.len() as u64);
            for id in kw {
                put_u64(&mut out, *id as u64);
            }
            put_f64(&mut out, *e);
        }
        for mode in Mode::ALL {
            match self.thresholds.get(mode) {
                Some(t) => {
                    out.push(1);
                    put_f64(&mut out, t);
                }
                None => {
                    out.push(0);
                    put_f64(&mut out, 0.0);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let cfg = RunConfig::from_toml(&string(&mut cur)?)?;
        let inventory_checksum = string(&mut cur)?;
        let seed = cur.u64()?;
        if seed != cfg.train.seed {
            return Err(Error::Format(format!(
                "checkpoint seed {seed} disagrees with its config ({})",
                cfg.train.seed
            )));
        }
        let epoch = cur.u64()? as usize;

        let mut model = Model::new(&cfg)?;
        let n = cur.u64()? as usize;
        if n != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {n} parameter blocks, model expects {}",
                model.store.len()
            )));
        }
        for _ in 0..n {
            let name = string(&mut cur)?;
            let rows = cur.u64()? as usize;
            let cols = cur.u64()? as usize;
            let data = (0..rows * cols).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            model
                .store
                .set_by_name(&name, Tensor::new(rows, cols, data)?)
                .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        }
        model.bank = MemoryBank::restore(blob(&mut cur)?)?;
        if model.bank.size() != cfg.corpus.k || model.bank.dim() != cfg.model.d_proj {
            return Err(Error::Format("memory bank shape disagrees with the config".into()));
        }
        let n_vel = cur.u64()? as usize;
        if n_vel != 0 && n_vel != model.store.len() {
            return Err(Error::Format(format!("{n_vel} momentum buffers for {n} parameters")));
        }
        let mut velocity = Vec::with_capacity(n_vel);
        for (_, p) in model.store.iter().take(n_vel) {
            let rows = cur.u64()? as usize;
            let cols = cur.u64()? as usize;
            if [rows, cols] != p.shape() {
                return Err(Error::Format("momentum buffer shape disagrees with its parameter".into()));
            }
            let data = (0..rows * cols).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            velocity.push(Tensor::new(rows, cols, data)?);
        }

        let mut keyword_errors = BTreeMap::new();
        for _ in 0..cur.u64()? {
            let len = cur.u64()? as usize;
            let kw = (0..len).map(|_| cur.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            keyword_errors.insert(kw, cur.f64()?);
        }
        let mut thresholds = Thresholds::default();
        for mode in Mode::ALL {
            let present = cur.u8()? != 0;
            let t = cur.f64()?;
            thresholds.set(mode, present.then_some(t));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            model,
            inventory_checksum,
            epoch,
            velocity,
            keyword_errors,
            thresholds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the dataset was generated from the same phoneme inventory.
    pub fn check_inventory(&self, checksum: &str) -> Result<()> {
        if checksum != self.inventory_checksum {
            return Err(Error::Compatibility(format!(
                "dataset inventory {checksum} does not match checkpoint inventory {}",
                self.inventory_checksum
            )));
        }
        Ok(())
    }
}
