//! Persistent enrollments: projected text and/or audio features per keyword
//! name, tied to the checkpoint that produced them by a SHA-256 digest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Keyword;
use crate::dataset::{decode_f64, encode_f64};
use crate::error::{Error, Result};
use crate::model::Enrollment;
use crate::numerics::Tensor;

const KIND: &str = "plcl-enrollments";
pub const STORE_VERSION: u32 = 1;

pub fn checkpoint_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: String,
}

impl Matrix {
    fn from_tensor(t: &Tensor) -> Self {
        Matrix {
            rows: t.rows(),
            cols: t.cols(),
            data: encode_f64(t.data()),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        let data = decode_f64(&self.data, self.rows * self.cols).map_err(Error::Format)?;
        Tensor::new(self.rows, self.cols, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    text: Option<Keyword>,
    text_features: Option<Matrix>,
    audio_features: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentStore {
    kind: String,
    version: u32,
    checkpoint: String,
    entries: BTreeMap<String, Entry>,
}

impl EnrollmentStore {
    pub fn new(checkpoint_digest: &str) -> Self {
        EnrollmentStore {
            kind: KIND.into(),
            version: STORE_VERSION,
            checkpoint: checkpoint_digest.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Adds or replaces the entry `name`.
    pub fn insert(&mut self, name: &str, e: &Enrollment) -> Result<()> {
        if e.mode().is_none() {
            return Err(Error::Usage("enrollment needs text, audio, or both".into()));
        }
        self.entries.insert(
            name.to_string(),
            Entry {
                text: e.text.as_ref().map(|(ids, _)| ids.clone()),
                text_features: e.text.as_ref().map(|(_, t)| Matrix::from_tensor(t)),
                audio_features: e.audio.as_ref().map(Matrix::from_tensor),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Enrollment> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Usage(format!("no enrollment named {name:?}")))?;
        let text = match (&e.text, &e.text_features) {
            (Some(ids), Some(m)) => {
                let t = m.to_tensor()?;
                if t.rows() != ids.len() {
                    return Err(Error::Format(format!("enrollment {name:?}: text features disagree with its phonemes")));
                }
                Some((ids.clone(), t))
            }
            (None, None) => None,
            _ => return Err(Error::Format(format!("enrollment {name:?}: text without features"))),
        };
        let audio = e.audio_features.as_ref().map(Matrix::to_tensor).transpose()?;
        Ok(Enrollment { text, audio })
    }

    /// Fails unless the store was written for the checkpoint with `digest`.
    pub fn check_checkpoint(&self, digest: &str) -> Result<()> {
        if self.checkpoint != digest {
            return Err(Error::Compatibility(format!(
                "enrollment store was made with checkpoint {}, not {digest}",
                self.checkpoint
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("store serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: EnrollmentStore =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("enrollment store: {e}")))?;
        if s.kind != KIND || s.version != STORE_VERSION {
            return Err(Error::Format(format!(
                "not an enrollment store of version {STORE_VERSION} ({} v{})",
                s.kind, s.version
            )));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loads `path` if it exists, else starts an empty store for `digest`.
    pub fn open_or_new(path: &Path, digest: &str) -> Result<Self> {
        if path.exists() {
            let s = Self::load(path)?;
            s.check_checkpoint(digest)?;
            Ok(s)
        } else {
            Ok(Self::new(digest))
        }
    }
}
