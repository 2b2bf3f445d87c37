//! Synthetic phoneme corpus: an inventory of prototype frames, utterances
//! whose phoneme alignment is known by construction, keyword vocabularies
//! organised in confusable families, and labelled query/enrollment pairs.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::rng::{self, Rng};
use crate::numerics::Tensor;

pub type PhonemeId = usize;
pub type Keyword = Vec<PhonemeId>;

const MAX_INVENTORY_RETRIES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeInventory {
    prototypes: Tensor,
    labels: Vec<String>,
}

impl PhonemeInventory {
    /// Prototypes are Gaussian draws rescaled to norm `√d_in`; the draw is
    /// repeated until every pair is at least `separation` apart.
    pub fn generate(k: usize, d_in: usize, separation: f64, seed: u64) -> Result<Self> {
        if k < 2 || d_in < 2 {
            return Err(Error::Generation(format!(
                "inventory needs K >= 2 and d_in >= 2, got K={k}, d_in={d_in}"
            )));
        }
        let radius = (d_in as f64).sqrt();
        let mut rng = rng::stream(seed, &[rng::tag("inventory")]);
        for _ in 0..MAX_INVENTORY_RETRIES {
            let mut data = Vec::with_capacity(k * d_in);
            for _ in 0..k {
                let v: Vec<f64> = (0..d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                data.extend(v.iter().map(|x| x * radius / n));
            }
            let prototypes = Tensor::new(k, d_in, data)?;
            let inv = PhonemeInventory {
                prototypes,
                labels: (0..k).map(|i| format!("p{i}")).collect(),
            };
            if inv.min_pairwise_distance() >= separation {
                return Ok(inv);
            }
        }
        Err(Error::Generation(format!(
            "could not reach separation {separation} for K={k}, d_in={d_in} \
             after {MAX_INVENTORY_RETRIES} draws"
        )))
    }

    pub fn from_parts(prototypes: Tensor, labels: Vec<String>) -> Result<Self> {
        if prototypes.rows() != labels.len() || labels.len() < 2 {
            return Err(Error::Format(format!(
                "inventory has {} prototypes and {} labels",
                prototypes.rows(),
                labels.len()
            )));
        }
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(Error::Format("inventory labels are not unique".into()));
        }
        Ok(PhonemeInventory { prototypes, labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn prototype(&self, id: PhonemeId) -> &[f64] {
        self.prototypes.row_slice(id)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let k = self.size();
        let mut best = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                let d = self
                    .prototype(i)
                    .iter()
                    .zip(self.prototype(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// SHA-256 over the size, width, labels and little-endian prototype bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.size() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for l in &self.labels {
            h.update(l.as_bytes());
            h.update([0u8]);
        }
        for v in self.prototypes.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn check_id(&self, id: PhonemeId) -> Result<()> {
        if id < self.size() {
            Ok(())
        } else {
            Err(Error::Vocabulary {
                id,
                size: self.size(),
            })
        }
    }

    /// Parses a whitespace-separated list of phoneme labels.
    pub fn parse_keyword(&self, text: &str) -> Result<Keyword> {
        let ids: Result<Keyword> = text
            .split_whitespace()
            .map(|tok| {
                self.labels
                    .iter()
                    .position(|l| l == tok)
                    .ok_or_else(|| Error::Usage(format!("unknown phoneme label {tok:?}")))
            })
            .collect();
        let ids = ids?;
        if ids.is_empty() {
            return Err(Error::Usage("empty keyword".into()));
        }
        Ok(ids)
    }

    pub fn render_keyword(&self, kw: &[PhonemeId]) -> String {
        kw.iter()
            .map(|id| self.labels[*id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Checks that `spans` tile `[0, n_frames)` in order with non-empty spans.
pub fn validate_spans(spans: &[(usize, usize)], n_frames: usize) -> Result<()> {
    let mut cursor = 0;
    for (i, &(s, e)) in spans.iter().enumerate() {
        if s > cursor {
            return Err(Error::Alignment(format!(
                "gap before span {i}: frames [{cursor},{s}) uncovered"
            )));
        }
        if s < cursor {
            return Err(Error::Alignment(format!(
                "span {i} = [{s},{e}) overlaps the previous span ending at {cursor}"
            )));
        }
        if e <= s {
            return Err(Error::Alignment(format!("span {i} = [{s},{e}) is empty")));
        }
        cursor = e;
    }
    if cursor != n_frames {
        return Err(Error::Alignment(format!(
            "spans end at frame {cursor} but the sequence has {n_frames} frames"
        )));
    }
    Ok(())
}

/// Frame matrix plus ground-truth phoneme alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    phonemes: Keyword,
    frames: Tensor,
    spans: Vec<(usize, usize)>,
}

impl Utterance {
    pub fn new(phonemes: Keyword, frames: Tensor, spans: Vec<(usize, usize)>) -> Result<Self> {
        if phonemes.is_empty() {
            return Err(Error::Contract("utterance with no phonemes".into()));
        }
        if spans.len() != phonemes.len() {
            return Err(Error::Alignment(format!(
                "{} spans for {} phonemes",
                spans.len(),
                phonemes.len()
            )));
        }
        validate_spans(&spans, frames.rows())?;
        Ok(Utterance {
            phonemes,
            frames,
            spans,
        })
    }

    pub fn phonemes(&self) -> &[PhonemeId] {
        &self.phonemes
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dur_min: usize,
    pub dur_max: usize,
    pub noise_sigma: f64,
    pub speaker_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dur_min: 2,
            dur_max: 4,
            noise_sigma: 0.3,
            speaker_sigma: 0.3,
        }
    }
}

/// Each phoneme lasts `Uniform{dur_min..=dur_max}` frames; each frame is the
/// prototype plus the speaker offset plus isotropic Gaussian noise.
pub fn synthesize_utterance(
    inv: &PhonemeInventory,
    phonemes: &[PhonemeId],
    dur_min: usize,
    dur_max: usize,
    noise_sigma: f64,
    speaker_offset: &[f64],
    seed: u64,
) -> Result<Utterance> {
    if phonemes.is_empty() {
        return Err(Error::Contract("cannot synthesize an empty phoneme sequence".into()));
    }
    if dur_min < 1 || dur_min > dur_max {
        return Err(Error::Contract(format!(
            "durations need 1 <= dur_min <= dur_max, got {dur_min}..{dur_max}"
        )));
    }
    if speaker_offset.len() != inv.dim() {
        return Err(Error::Shape {
            op: "synthesize_utterance",
            left: vec![inv.dim()],
            right: vec![speaker_offset.len()],
        });
    }
    for &p in phonemes {
        inv.check_id(p)?;
    }
    let mut rng = rng::stream(seed, &[rng::tag("utterance")]);
    let d = inv.dim();
    let mut data = Vec::new();
    let mut spans = Vec::with_capacity(phonemes.len());
    let mut t = 0;
    for &p in phonemes {
        let dur = rng.random_range(dur_min..=dur_max);
        for _ in 0..dur {
            for (j, base) in inv.prototype(p).iter().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(base + speaker_offset[j] + noise_sigma * noise);
            }
        }
        spans.push((t, t + dur));
        t += dur;
    }
    Utterance::new(phonemes.to_vec(), Tensor::new(t, d, data)?, spans)
}

/// Samples a speaker offset and synthesizes; the whole draw depends only on `seed`.
pub fn synthesize_with_speaker(
    inv: &PhonemeInventory,
    phonemes: &[PhonemeId],
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Utterance> {
    let mut rng = rng::stream(seed, &[rng::tag("speaker")]);
    let offset: Vec<f64> = (0..inv.dim())
        .map(|_| cfg.speaker_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect::<Vec<f64>>();
    synthesize_utterance(
        inv,
        phonemes,
        cfg.dur_min,
        cfg.dur_max,
        cfg.noise_sigma,
        &offset,
        rng::derive(seed, &[rng::tag("frames")]),
    )
}

/// Unit-cost edit distance (insert, delete, substitute).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    // Keyword-length inputs stay on the stack.
    let mut small = [0usize; 64];
    let mut large = Vec::new();
    let row: &mut [usize] = if b.len() < small.len() {
        &mut small[..=b.len()]
    } else {
        large.resize(b.len() + 1, 0);
        &mut large
    };
    for (j, v) in row.iter_mut().enumerate() {
        *v = j;
    }
    for (i, x) in a.iter().enumerate() {
        // `diag` holds the previous row's value at j - 1.
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(x != y)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLabel {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriLabel {
    Positive,
    NaturalNegative,
    AugmentedHardNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub query: Utterance,
    pub enroll_text: Option<Keyword>,
    pub enroll_audio: Option<Utterance>,
    pub match_label: MatchLabel,
    pub tri_label: TriLabel,
    pub difficulty: Option<Difficulty>,
}

impl PairExample {
    pub fn validate(&self) -> Result<()> {
        if self.enroll_text.is_none() && self.enroll_audio.is_none() {
            return Err(Error::Contract("pair has no enrollment modality".into()));
        }
        match self.match_label {
            MatchLabel::Positive => {
                if self.tri_label != TriLabel::Positive {
                    return Err(Error::Contract("positive pair with a negative tri-label".into()));
                }
                if self.difficulty.is_some() {
                    return Err(Error::Contract("difficulty set on a positive pair".into()));
                }
            }
            MatchLabel::Negative => {
                if self.tri_label == TriLabel::Positive {
                    return Err(Error::Contract("negative pair with a positive tri-label".into()));
                }
                if self.difficulty.is_none() {
                    return Err(Error::Contract("negative pair without difficulty".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_positive(&self) -> bool {
        self.match_label == MatchLabel::Positive
    }

    pub fn label_value(&self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }

    /// Phonemes of the enrolled keyword, from text if present, else from the enrollment audio.
    pub fn enrolled_keyword(&self) -> &[PhonemeId] {
        match (&self.enroll_text, &self.enroll_audio) {
            (Some(t), _) => t,
            (None, Some(a)) => a.phonemes(),
            (None, None) => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub size: usize,
    pub family_size: usize,
    pub len_min: usize,
    pub len_max: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            size: 60,
            family_size: 3,
            len_min: 3,
            len_max: 8,
        }
    }
}

/// Keywords grouped in families: a random root plus variants one or two
/// phoneme edits away, so that confusable keyword pairs exist by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub keywords: Vec<Keyword>,
    pub family: Vec<usize>,
}

impl Vocabulary {
    pub fn num_families(&self) -> usize {
        self.family.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset_by_family(&self, families: &[usize]) -> Vocabulary {
        let mut out = Vocabulary {
            keywords: Vec::new(),
            family: Vec::new(),
        };
        for (kw, f) in self.keywords.iter().zip(&self.family) {
            if families.contains(f) {
                out.keywords.push(kw.clone());
                out.family.push(*f);
            }
        }
        out
    }
}

fn random_root(k: usize, len: usize, rng: &mut Rng) -> Keyword {
    let mut kw = Vec::with_capacity(len);
    while kw.len() < len {
        let p = rng.random_range(0..k);
        if kw.last() != Some(&p) {
            kw.push(p);
        }
    }
    kw
}

fn random_edit(kw: &[PhonemeId], k: usize, len_min: usize, len_max: usize, rng: &mut Rng) -> Keyword {
    let mut out = kw.to_vec();
    loop {
        match rng.random_range(0..3) {
            0 if out.len() < len_max => {
                let pos = rng.random_range(0..=out.len());
                out.insert(pos, rng.random_range(0..k));
                return out;
            }
            1 => {
                let pos = rng.random_range(0..out.len());
                let old = out[pos];
                let mut p = rng.random_range(0..k);
                while p == old {
                    p = rng.random_range(0..k);
                }
                out[pos] = p;
                return out;
            }
            2 if out.len() > len_min => {
                let pos = rng.random_range(0..out.len());
                out.remove(pos);
                return out;
            }
            _ => {}
        }
    }
}

pub fn generate_vocabulary(k: usize, cfg: &VocabConfig, seed: u64) -> Result<Vocabulary> {
    if cfg.size < 2 || cfg.family_size < 1 || cfg.len_min < 1 || cfg.len_min > cfg.len_max {
        return Err(Error::Generation(format!("invalid vocabulary config {cfg:?}")));
    }
    let mut rng = rng::stream(seed, &[rng::tag("vocabulary")]);
    let mut vocab = Vocabulary {
        keywords: Vec::new(),
        family: Vec::new(),
    };
    let mut fam = 0;
    let budget = cfg.size * 1000;
    let mut attempts = 0;
    while vocab.keywords.len() < cfg.size {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Generation(format!(
                "could not draw {} distinct keywords over {k} phonemes",
                cfg.size
            )));
        }
        let len = rng.random_range(cfg.len_min..=cfg.len_max);
        let root = random_root(k, len, &mut rng);
        if vocab.keywords.contains(&root) {
            continue;
        }
        vocab.keywords.push(root.clone());
        vocab.family.push(fam);
        let mut members = 1;
        let mut tries = 0;
        while members < cfg.family_size && vocab.keywords.len() < cfg.size && tries < 100 {
            tries += 1;
            let mut v = random_edit(&root, k, cfg.len_min, cfg.len_max, &mut rng);
            if rng.random_bool(0.5) {
                v = random_edit(&v, k, cfg.len_min, cfg.len_max, &mut rng);
            }
            if !vocab.keywords.contains(&v) {
                vocab.keywords.push(v);
                vocab.family.push(fam);
                members += 1;
            }
        }
        fam += 1;
    }
    Ok(vocab)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub positives: usize,
    pub easy: usize,
    pub hard: usize,
}

impl PairCounts {
    pub fn total(&self) -> usize {
        self.positives + self.easy + self.hard
    }
}

pub type PairIndex = Vec<(usize, usize)>;

/// Ordered keyword index pairs `(a, b)`, `a ≠ b`, split by edit distance.
pub fn negative_keyword_pairs(vocab: &[Keyword], hard_threshold: usize) -> (PairIndex, PairIndex) {
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for a in 0..vocab.len() {
        for b in 0..vocab.len() {
            if a == b {
                continue;
            }
            if levenshtein(&vocab[a], &vocab[b]) <= hard_threshold {
                hard.push((a, b));
            } else {
                easy.push((a, b));
            }
        }
    }
    (easy, hard)
}

/// Positives pair two independent renditions of one keyword; negatives pair
/// a query keyword with a different enrolled keyword, labelled hard when the
/// edit distance is at most `hard_threshold`. Every pair carries both the
/// enrollment text and an enrollment utterance.
pub fn build_pairs(
    vocab: &[Keyword],
    inv: &PhonemeInventory,
    synth: &SynthConfig,
    counts: PairCounts,
    hard_threshold: usize,
    seed: u64,
) -> Result<Vec<PairExample>> {
    if vocab.len() < 2 {
        return Err(Error::Generation(format!(
            "vocabulary needs at least 2 keywords, got {}",
            vocab.len()
        )));
    }
    if hard_threshold < 1 {
        return Err(Error::Generation("hard_threshold must be >= 1".into()));
    }
    let (easy_pairs, hard_pairs) = negative_keyword_pairs(vocab, hard_threshold);
    if counts.hard > 0 && hard_pairs.is_empty() {
        return Err(Error::Generation(format!(
            "requested {} hard negatives but the vocabulary has no keyword pairs within \
             {hard_threshold} edits (achievable: 0)",
            counts.hard
        )));
    }
    if counts.easy > 0 && easy_pairs.is_empty() {
        return Err(Error::Generation(format!(
            "requested {} easy negatives but every keyword pair is within {hard_threshold} \
             edits (achievable: 0)",
            counts.easy
        )));
    }

    let synth_pair = |class: &str, i: usize, q: &Keyword, e: &Keyword| -> Result<(Utterance, Utterance)> {
        let base = rng::derive(seed, &[rng::tag(class), i as u64]);
        let query = synthesize_with_speaker(inv, q, synth, rng::derive(base, &[0]))?;
        let enroll = synthesize_with_speaker(inv, e, synth, rng::derive(base, &[1]))?;
        Ok((query, enroll))
    };

    let mut pick_rng = rng::stream(seed, &[rng::tag("pair-pick")]);
    let mut out = Vec::with_capacity(counts.total());
    let mut order: Vec<usize> = (0..vocab.len()).collect();
    for i in 0..counts.positives {
        if i % vocab.len() == 0 {
            order.shuffle(&mut pick_rng);
        }
        let kw = &vocab[order[i % vocab.len()]];
        let (query, enroll) = synth_pair("positive", i, kw, kw)?;
        out.push(PairExample {
            query,
            enroll_text: Some(kw.clone()),
            enroll_audio: Some(enroll),
            match_label: MatchLabel::Positive,
            tri_label: TriLabel::Positive,
            difficulty: None,
        });
    }
    for (class, n, pool, difficulty) in [
        ("easy", counts.easy, &easy_pairs, Difficulty::Easy),
        ("hard", counts.hard, &hard_pairs, Difficulty::Hard),
    ] {
        let mut pool_order: Vec<usize> = (0..pool.len()).collect();
        for i in 0..n {
            if i % pool.len() == 0 {
                pool_order.shuffle(&mut pick_rng);
            }
            let (a, b) = pool[pool_order[i % pool.len()]];
            let (query, enroll) = synth_pair(class, i, &vocab[a], &vocab[b])?;
            out.push(PairExample {
                query,
                enroll_text: Some(vocab[b].clone()),
                enroll_audio: Some(enroll),
                match_label: MatchLabel::Negative,
                tri_label: TriLabel::NaturalNegative,
                difficulty: Some(difficulty),
            });
        }
    }
    Ok(out)
}
