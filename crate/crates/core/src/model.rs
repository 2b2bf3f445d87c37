//! Encoders, heads and memory bank bundled behind one parameter store, with
//! the per-pair training forward pass and modality-masked inference.

use serde::{Deserialize, Serialize};

use crate::alignment::{pool_by_alignment, PooledSequence};
use crate::config::RunConfig;
use crate::corpus::{Keyword, PairExample, PhonemeId, Utterance};
use crate::encoders::{EncodedSequence, Encoders, Origin};
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::numerics::rng;
use crate::numerics::{Bound, Graph, ParamStore, Tensor, Var};
use crate::verifier::{inject_memory_rows, similarity_matrix, HeadOutput, Verifier};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Text,
    Audio,
    Both,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Text, Mode::Audio, Mode::Both];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Text => "text",
            Mode::Audio => "audio",
            Mode::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "text" => Ok(Mode::Text),
            "audio" => Ok(Mode::Audio),
            "both" => Ok(Mode::Both),
            _ => Err(Error::Usage(format!("unknown enrollment mode {s:?} (text, audio, both)"))),
        }
    }
}

/// Encoder invocations made by one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub audio_encodes: usize,
    pub text_encodes: usize,
    pub projections: usize,
}

/// Everything a training step needs from one pair.
#[derive(Clone, Debug)]
pub struct PairForward {
    pub text: HeadOutput,
    pub audio: HeadOutput,
    pub fused: Var,
    /// Query projections pooled over the query's own phoneme spans.
    pub pooled_query: PooledSequence,
    /// Projected text tokens of the enrollment.
    pub text_proj: Var,
    /// Enrollment-audio projections pooled over its spans.
    pub pooled_enroll: PooledSequence,
    pub stats: ForwardStats,
}

/// Projected enrollment features: text tokens with their phoneme ids, and
/// enrollment-audio frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Enrollment {
    pub text: Option<(Keyword, Tensor)>,
    pub audio: Option<Tensor>,
}

impl Enrollment {
    pub fn mode(&self) -> Option<Mode> {
        match (&self.text, &self.audio) {
            (Some(_), Some(_)) => Some(Mode::Both),
            (Some(_), None) => Some(Mode::Text),
            (None, Some(_)) => Some(Mode::Audio),
            (None, None) => None,
        }
    }
}

/// Scores and matrices of one inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub score: f64,
    pub text_score: Option<f64>,
    pub audio_score: Option<f64>,
    /// Text-vs-query cosine matrix including injected bank rows.
    pub m_at: Option<Tensor>,
    pub m_aa: Option<Tensor>,
    pub text_attention: Option<Tensor>,
    pub audio_attention: Option<Tensor>,
    pub injected: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub encoders: Encoders,
    pub verifier: Verifier,
    pub bank: MemoryBank,
}

fn ids_hash(ids: &[PhonemeId]) -> u64 {
    let s: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    rng::tag(&s.join(" "))
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoders = Encoders::register(&cfg.encoder(), &mut store)?;
        let verifier = Verifier::register(&cfg.verifier(), &mut store)?;
        let bank = MemoryBank::new(cfg.corpus.k, cfg.model.d_proj, cfg.model.alpha, true)?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            encoders,
            verifier,
            bank,
        })
    }

    fn eps(&self) -> f64 {
        self.verifier.config().eps
    }

    fn encode_audio(&self, g: &mut Graph, b: &Bound, u: &Utterance, origin: Origin, st: &mut ForwardStats) -> Result<EncodedSequence> {
        let frames = g.constant(u.frames().clone());
        let e = self.encoders.encode_audio(g, b, frames, origin)?;
        st.audio_encodes += 1;
        st.projections += 1;
        self.encoders.project(g, b, &e)
    }

    fn encode_text(&self, g: &mut Graph, b: &Bound, ids: &[PhonemeId], st: &mut ForwardStats) -> Result<EncodedSequence> {
        let e = self.encoders.encode_text(g, b, ids)?;
        st.text_encodes += 1;
        st.projections += 1;
        self.encoders.project(g, b, &e)
    }

    /// Injection count actually usable given the bank's eligible rows.
    pub fn inject_count(&self, exclude: &[PhonemeId], use_bank: bool) -> usize {
        if !use_bank {
            return 0;
        }
        self.verifier
            .config()
            .inject_count
            .min(self.bank.eligible(exclude).len())
    }

    #[allow(clippy::too_many_arguments)]
    fn text_path(
        &self,
        g: &mut Graph,
        b: &Bound,
        q: &EncodedSequence,
        t: &EncodedSequence,
        ids: &[PhonemeId],
        inject: usize,
        seed: u64,
    ) -> Result<(Var, HeadOutput)> {
        let m = similarity_matrix(g, t, q, self.eps())?;
        let m = inject_memory_rows(g, m, &self.bank, inject, q, ids, seed, self.eps())?;
        let head = self.verifier.text_head(g, b, m)?;
        Ok((m, head))
    }

    fn audio_path(&self, g: &mut Graph, b: &Bound, q: &EncodedSequence, a: &EncodedSequence) -> Result<(Var, HeadOutput)> {
        let m = similarity_matrix(g, a, q, self.eps())?;
        let head = self.verifier.audio_head(g, b, m)?;
        Ok((m, head))
    }

    /// One encoder pass per input; the heads and the contrastive terms share
    /// the same projections.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        b: &Bound,
        pair: &PairExample,
        inject_seed: u64,
        use_bank: bool,
    ) -> Result<PairForward> {
        let (Some(text), Some(audio)) = (&pair.enroll_text, &pair.enroll_audio) else {
            return Err(Error::Contract("training pairs need both enrollment modalities".into()));
        };
        let mut st = ForwardStats::default();
        let q = self.encode_audio(g, b, &pair.query, Origin::QueryAudio, &mut st)?;
        let t = self.encode_text(g, b, text, &mut st)?;
        let a = self.encode_audio(g, b, audio, Origin::EnrollAudio, &mut st)?;
        let inject = self.inject_count(text, use_bank);
        let (_, th) = self.text_path(g, b, &q, &t, text, inject, inject_seed)?;
        let (_, ah) = self.audio_path(g, b, &q, &a)?;
        let fused = self.verifier.fuse(g, b, Some(&th), Some(&ah))?;
        let pooled_query = pool_by_alignment(g, q.embeddings, pair.query.spans(), pair.query.phonemes())?;
        let pooled_enroll = pool_by_alignment(g, a.embeddings, audio.spans(), audio.phonemes())?;
        Ok(PairForward {
            text: th,
            audio: ah,
            fused,
            pooled_query,
            text_proj: t.embeddings,
            pooled_enroll,
            stats: st,
        })
    }

    /// Seed for the bank rows injected at inference: fixed per enrollment text.
    pub fn inference_inject_seed(&self, text: &[PhonemeId]) -> u64 {
        rng::derive(self.cfg.train.seed, &[rng::tag("inference-inject"), ids_hash(text)])
    }

    /// Encodes and projects the enrollment inputs once, for storage and reuse.
    pub fn enroll(&self, text: Option<&[PhonemeId]>, audio: Option<&Utterance>) -> Result<Enrollment> {
        if text.is_none() && audio.is_none() {
            return Err(Error::Contract("enrollment needs at least one modality".into()));
        }
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let mut st = ForwardStats::default();
        let text = match text {
            Some(ids) => {
                let t = self.encode_text(&mut g, &b, ids, &mut st)?;
                Some((ids.to_vec(), g.value(t.embeddings).clone()))
            }
            None => None,
        };
        let audio = match audio {
            Some(u) => {
                let a = self.encode_audio(&mut g, &b, u, Origin::EnrollAudio, &mut st)?;
                Some(g.value(a.embeddings).clone())
            }
            None => None,
        };
        Ok(Enrollment { text, audio })
    }

    /// Scores a query against whichever enrollment modalities are present:
    /// text only, audio only, or both fused.
    pub fn infer_enrolled(&self, query: &Utterance, enrollment: &Enrollment) -> Result<Inference> {
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let mut st = ForwardStats::default();
        let q = self.encode_audio(&mut g, &b, query, Origin::QueryAudio, &mut st)?;
        let mut out = Inference {
            score: 0.0,
            text_score: None,
            audio_score: None,
            m_at: None,
            m_aa: None,
            text_attention: None,
            audio_attention: None,
            injected: 0,
        };
        let th = match &enrollment.text {
            Some((ids, proj)) => {
                let t = EncodedSequence {
                    embeddings: g.constant(proj.clone()),
                    origin: Origin::Text,
                };
                let inject = self.inject_count(ids, self.cfg.train.use_memory_bank);
                let (m, h) = self.text_path(&mut g, &b, &q, &t, ids, inject, self.inference_inject_seed(ids))?;
                out.text_score = Some(g.value(h.score).item());
                out.m_at = Some(g.value(m).clone());
                out.text_attention = Some(g.value(h.attention).clone());
                out.injected = inject;
                Some(h)
            }
            None => None,
        };
        let ah = match &enrollment.audio {
            Some(proj) => {
                let a = EncodedSequence {
                    embeddings: g.constant(proj.clone()),
                    origin: Origin::EnrollAudio,
                };
                let (m, h) = self.audio_path(&mut g, &b, &q, &a)?;
                out.audio_score = Some(g.value(h.score).item());
                out.m_aa = Some(g.value(m).clone());
                out.audio_attention = Some(g.value(h.attention).clone());
                Some(h)
            }
            None => None,
        };
        out.score = match (&th, &ah) {
            (Some(_), Some(_)) => {
                let f = self.verifier.fuse(&mut g, &b, th.as_ref(), ah.as_ref())?;
                g.value(f).item()
            }
            (Some(_), None) => out.text_score.expect("text score"),
            (None, Some(_)) => out.audio_score.expect("audio score"),
            (None, None) => return Err(Error::Contract("inference needs at least one enrollment modality".into())),
        };
        Ok(out)
    }

    pub fn infer_detail(&self, query: &Utterance, text: Option<&[PhonemeId]>, audio: Option<&Utterance>) -> Result<Inference> {
        self.infer_enrolled(query, &self.enroll(text, audio)?)
    }

    pub fn infer(&self, query: &Utterance, text: Option<&[PhonemeId]>, audio: Option<&Utterance>) -> Result<f64> {
        Ok(self.infer_detail(query, text, audio)?.score)
    }

    /// Scores a dataset pair with the modalities selected by `mode` masked in.
    pub fn score_pair(&self, pair: &PairExample, mode: Mode) -> Result<f64> {
        let text = pair.enroll_text.as_deref();
        let audio = pair.enroll_audio.as_ref();
        let (t, a) = match mode {
            Mode::Text => (text, None),
            Mode::Audio => (None, audio),
            Mode::Both => (text, audio),
        };
        if (mode == Mode::Text && t.is_none()) || (mode == Mode::Audio && a.is_none()) {
            return Err(Error::Contract(format!("pair lacks the {} enrollment", mode.name())));
        }
        self.infer(&pair.query, t, a)
    }
}
