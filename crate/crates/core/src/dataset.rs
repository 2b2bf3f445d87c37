//! Line-delimited dataset files.
//!
//! Line 1 is a header record carrying the format version, inventory shape,
//! inventory checksum, the inventory itself and the record count. Every
//! following line is one pair. Frame matrices are base64 of little-endian
//! f64 values, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Difficulty, Keyword, MatchLabel, PairExample, PhonemeInventory, TriLabel, Utterance,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inventory: PhonemeInventory,
    pub pairs: Vec<PairExample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    k: usize,
    d_in: usize,
    inventory_checksum: String,
    labels: Vec<String>,
    prototypes: String,
    records: usize,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct UtteranceRecord {
    phonemes: Vec<usize>,
    n_frames: usize,
    d_in: usize,
    frames: String,
    spans: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    query: UtteranceRecord,
    enroll_text: Option<Keyword>,
    enroll_audio: Option<UtteranceRecord>,
    match_label: MatchLabel,
    tri_label: TriLabel,
    difficulty: Option<Difficulty>,
}

pub(crate) fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub(crate) fn decode_f64(text: &str, expected: usize) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(text).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() != expected * 8 {
        return Err(format!(
            "expected {expected} values, found {} bytes",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl UtteranceRecord {
    pub(crate) fn from_utterance(u: &Utterance) -> Self {
        UtteranceRecord {
            phonemes: u.phonemes().to_vec(),
            n_frames: u.num_frames(),
            d_in: u.frames().cols(),
            frames: encode_f64(u.frames().data()),
            spans: u.spans().to_vec(),
        }
    }

    pub(crate) fn into_utterance(self) -> std::result::Result<Utterance, String> {
        let data = decode_f64(&self.frames, self.n_frames * self.d_in)?;
        let frames = Tensor::new(self.n_frames, self.d_in, data).map_err(|e| e.to_string())?;
        Utterance::new(self.phonemes, frames, self.spans).map_err(|e| e.to_string())
    }
}

/// Serializes one utterance as a standalone JSON document (used for audio files).
pub fn utterance_to_json(u: &Utterance) -> String {
    serde_json::to_string(&UtteranceRecord::from_utterance(u)).expect("utterance serializes")
}

pub fn utterance_from_json(text: &str) -> Result<Utterance> {
    let rec: UtteranceRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        record: 0,
        message: e.to_string(),
    })?;
    rec.into_utterance()
        .map_err(|message| Error::Parse { record: 0, message })
}

pub fn load_utterance(path: &Path) -> Result<Utterance> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    utterance_from_json(&text)
}

fn check_pair(p: &PairExample, inv: &PhonemeInventory) -> Result<()> {
    p.validate()?;
    let mut utts = vec![&p.query];
    utts.extend(p.enroll_audio.as_ref());
    for u in utts {
        if u.frames().cols() != inv.dim() {
            return Err(Error::Shape {
                op: "dataset",
                left: vec![inv.dim()],
                right: vec![u.frames().cols()],
            });
        }
        for &id in u.phonemes() {
            inv.check_id(id)?;
        }
    }
    for &id in p.enroll_text.iter().flatten() {
        inv.check_id(id)?;
    }
    Ok(())
}

/// Renders a dataset to its file contents.
pub fn dataset_to_string(ds: &Dataset) -> Result<String> {
    let inv = &ds.inventory;
    let header = Header {
        kind: "plcl-dataset".into(),
        version: DATASET_VERSION,
        k: inv.size(),
        d_in: inv.dim(),
        inventory_checksum: inv.checksum(),
        labels: inv.labels().to_vec(),
        prototypes: encode_f64(inv.prototypes().data()),
        records: ds.pairs.len(),
    };
    let mut out = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    out.push('\n');
    for p in &ds.pairs {
        check_pair(p, inv)?;
        let rec = PairRecord {
            query: UtteranceRecord::from_utterance(&p.query),
            enroll_text: p.enroll_text.clone(),
            enroll_audio: p.enroll_audio.as_ref().map(UtteranceRecord::from_utterance),
            match_label: p.match_label,
            tri_label: p.tri_label,
            difficulty: p.difficulty,
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let text = dataset_to_string(ds)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses file contents. Record 0 is the header; pair records count from 1.
pub fn dataset_from_str(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let header_line = lines.next().ok_or(Error::Parse {
        record: 0,
        message: "empty file".into(),
    })?;
    let header: Header = serde_json::from_str(header_line).map_err(|e| Error::Parse {
        record: 0,
        message: e.to_string(),
    })?;
    if header.kind != "plcl-dataset" {
        return Err(Error::Format(format!("not a dataset file (kind {:?})", header.kind)));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {} is not supported (expected {DATASET_VERSION})",
            header.version
        )));
    }
    let protos = decode_f64(&header.prototypes, header.k * header.d_in)
        .map_err(|message| Error::Parse { record: 0, message })?;
    let inventory =
        PhonemeInventory::from_parts(Tensor::new(header.k, header.d_in, protos)?, header.labels)?;
    if inventory.checksum() != header.inventory_checksum {
        return Err(Error::Compatibility(
            "inventory checksum does not match the stored prototypes".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let record = i + 1;
        let parse_err = |message: String| Error::Parse { record, message };
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let pair = PairExample {
            query: rec.query.into_utterance().map_err(parse_err)?,
            enroll_text: rec.enroll_text,
            enroll_audio: match rec.enroll_audio {
                Some(u) => Some(u.into_utterance().map_err(parse_err)?),
                None => None,
            },
            match_label: rec.match_label,
            tri_label: rec.tri_label,
            difficulty: rec.difficulty,
        };
        check_pair(&pair, &inventory).map_err(|e| parse_err(e.to_string()))?;
        pairs.push(pair);
    }
    if pairs.len() != header.records {
        return Err(Error::Parse {
            record: pairs.len() + 1,
            message: format!(
                "header announces {} records but the file holds {}",
                header.records,
                pairs.len()
            ),
        });
    }
    Ok(Dataset { inventory, pairs })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_str(&text)
}
