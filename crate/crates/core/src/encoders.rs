//! Query/enrollment audio encoder, phoneme text encoder, and the two
//! per-modality projections into the shared embedding space.

use serde::{Deserialize, Serialize};

use crate::corpus::PhonemeId;
use crate::error::{Error, Result};
use crate::numerics::rng::{self, Rng};
use crate::numerics::{gru_sequence, linear, Bound, Graph, GruVars, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub text_vocab: usize,
    pub d_model: usize,
    pub d_proj: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.text_vocab == 0 || self.d_model == 0 || self.d_proj == 0 {
            return Err(Error::Config(format!("encoder sizes must be positive: {self:?}")));
        }
        if self.d_proj > self.d_model {
            return Err(Error::Config(format!(
                "d_proj ({}) must not exceed d_model ({})",
                self.d_proj, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    QueryAudio,
    EnrollAudio,
    Text,
}

#[derive(Clone, Copy, Debug)]
pub struct EncodedSequence {
    pub embeddings: Var,
    pub origin: Origin,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GruIds {
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    bh: ParamId,
}

impl GruIds {
    pub(crate) fn register(store: &mut ParamStore, name: &str, d_in: usize, d_h: usize, rng: &mut Rng) -> Self {
        GruIds {
            wx: store.add_glorot(&format!("{name}.wx"), d_in, 3 * d_h, rng),
            wh: store.add_glorot(&format!("{name}.wh"), d_h, 3 * d_h, rng),
            bx: store.add_filled(&format!("{name}.bx"), 1, 3 * d_h, 0.0),
            bh: store.add_filled(&format!("{name}.bh"), 1, 3 * d_h, 0.0),
        }
    }

    pub(crate) fn bind(&self, b: &Bound) -> GruVars {
        GruVars {
            wx: b.var(self.wx),
            wh: b.var(self.wh),
            bx: b.var(self.bx),
            bh: b.var(self.bh),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub(crate) fn register(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Dense {
            w: store.add_glorot(&format!("{name}.w"), d_in, d_out, rng),
            b: store.add_filled(&format!("{name}.b"), 1, d_out, 0.0),
        }
    }

    pub(crate) fn apply(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        linear(g, x, b.var(self.w), b.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
struct Projection {
    ln_gain: ParamId,
    ln_bias: ParamId,
    fc: Dense,
}

/// Parameter handles for all encoder weights inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoders {
    cfg: EncoderConfig,
    audio_fc: Dense,
    audio_gru: GruIds,
    text_embedding: ParamId,
    text_gru: GruIds,
    audio_proj: Projection,
    text_proj: Projection,
}

const LN_EPS: f64 = 1e-5;

impl Encoders {
    pub fn register(cfg: &EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, &[rng::tag("encoders")]);
        let (d, dm, dp) = (cfg.d_in, cfg.d_model, cfg.d_proj);
        let audio_fc = Dense::register(store, "audio.fc", d, dm, &mut rng);
        let audio_gru = GruIds::register(store, "audio.gru", dm, dm, &mut rng);
        let emb = Tensor::new(
            cfg.text_vocab,
            dm,
            (0..cfg.text_vocab * dm)
                .map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng) * 0.5)
                .collect(),
        )?;
        let text_embedding = store.add("text.embedding", emb);
        let text_gru = GruIds::register(store, "text.gru", dm, dm, &mut rng);
        let mut projection = |name: &str, rng: &mut Rng| Projection {
            ln_gain: store.add_filled(&format!("{name}.ln.gain"), 1, dm, 1.0),
            ln_bias: store.add_filled(&format!("{name}.ln.bias"), 1, dm, 0.0),
            fc: Dense::register(store, &format!("{name}.fc"), dm, dp, rng),
        };
        let audio_proj = projection("proj.audio", &mut rng);
        let text_proj = projection("proj.text", &mut rng);
        Ok(Encoders {
            cfg: cfg.clone(),
            audio_fc,
            audio_gru,
            text_embedding,
            text_gru,
            audio_proj,
            text_proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Pointwise FC + tanh, then a unidirectional GRU over frames.
    pub fn encode_audio(&self, g: &mut Graph, b: &Bound, frames: Var, origin: Origin) -> Result<EncodedSequence> {
        let [t, d] = g.shape(frames);
        if d != self.cfg.d_in {
            return Err(Error::Shape {
                op: "encode_audio",
                left: vec![t, self.cfg.d_in],
                right: vec![t, d],
            });
        }
        if t == 0 {
            return Err(Error::Contract("audio with no frames".into()));
        }
        if origin == Origin::Text {
            return Err(Error::Contract("audio encoder called with text origin".into()));
        }
        let x = self.audio_fc.apply(g, b, frames)?;
        let x = g.tanh(x);
        let (states, _) = gru_sequence(g, x, &self.audio_gru.bind(b))?;
        Ok(EncodedSequence {
            embeddings: states,
            origin,
        })
    }

    /// Embedding lookup, then a GRU over phoneme tokens.
    pub fn encode_text(&self, g: &mut Graph, b: &Bound, phonemes: &[PhonemeId]) -> Result<EncodedSequence> {
        if phonemes.is_empty() {
            return Err(Error::Contract("empty phoneme sequence".into()));
        }
        let x = g.gather(b.var(self.text_embedding), phonemes)?;
        let (states, _) = gru_sequence(g, x, &self.text_gru.bind(b))?;
        Ok(EncodedSequence {
            embeddings: states,
            origin: Origin::Text,
        })
    }

    /// Row-wise LayerNorm → FC → activation, with per-modality weights.
    pub fn project(&self, g: &mut Graph, b: &Bound, e: &EncodedSequence) -> Result<EncodedSequence> {
        let p = match e.origin {
            Origin::Text => &self.text_proj,
            Origin::QueryAudio | Origin::EnrollAudio => &self.audio_proj,
        };
        let x = g.layer_norm(e.embeddings, b.var(p.ln_gain), b.var(p.ln_bias), LN_EPS)?;
        let x = p.fc.apply(g, b, x)?;
        Ok(EncodedSequence {
            embeddings: self.cfg.activation.apply(g, x),
            origin: e.origin,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine_similarity, grad_check};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d_in: 4,
            text_vocab: 6,
            d_model: 8,
            d_proj: 5,
            activation: Activation::Tanh,
            seed: 3,
        }
    }

    fn setup() -> (ParamStore, Encoders) {
        let mut store = ParamStore::new();
        let enc = Encoders::register(&cfg(), &mut store).unwrap();
        (store, enc)
    }

    fn frames(t: usize, seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = rng::stream(seed, &[]);
        Tensor::new(t, 4, (0..t * 4).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_follow_input_lengths() {
        let (store, enc) = setup();
        for t in [1, 2, 17, 64] {
            let mut g = Graph::new();
            let b = store.bind_frozen(&mut g);
            let f = g.constant(frames(t, t as u64));
            let e = enc.encode_audio(&mut g, &b, f, Origin::QueryAudio).unwrap();
            assert_eq!(g.shape(e.embeddings), [t, 8]);
            let p = enc.project(&mut g, &b, &e).unwrap();
            assert_eq!(g.shape(p.embeddings), [t, 5]);
            let ids: Vec<usize> = (0..t).map(|i| i % 6).collect();
            let e = enc.encode_text(&mut g, &b, &ids).unwrap();
            assert_eq!(g.shape(e.embeddings), [t, 8]);
        }
    }

    #[test]
    fn wrong_input_width_and_bad_ids() {
        let (store, enc) = setup();
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let f = g.constant(Tensor::zeros(3, 5));
        assert!(matches!(
            enc.encode_audio(&mut g, &b, f, Origin::QueryAudio),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            enc.encode_text(&mut g, &b, &[1, 6]),
            Err(Error::Vocabulary { id: 6, size: 6 })
        ));
    }

    #[test]
    fn zero_parameters_stay_finite() {
        let (mut store, enc) = setup();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let f = g.constant(frames(6, 1));
        let e = enc.encode_audio(&mut g, &b, f, Origin::EnrollAudio).unwrap();
        let p = enc.project(&mut g, &b, &e).unwrap();
        assert!(g.value(p.embeddings).is_finite());
    }

    #[test]
    fn pure_and_deterministic() {
        let run = || {
            let (store, enc) = setup();
            let mut g = Graph::new();
            let b = store.bind_frozen(&mut g);
            let f = g.constant(frames(5, 9));
            let e = enc.encode_audio(&mut g, &b, f, Origin::QueryAudio).unwrap();
            let t1 = enc.encode_text(&mut g, &b, &[2, 4, 1]).unwrap();
            let t2 = enc.encode_text(&mut g, &b, &[2, 4, 1]).unwrap();
            assert_eq!(g.value(t1.embeddings), g.value(t2.embeddings));
            g.value(e.embeddings).clone()
        };
        let a = run();
        let b = run();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn constant_rows_project_identically() {
        let (store, enc) = setup();
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let x = g.constant(Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9, 0.0, 1.0, 0.5, -1.0, 0.1]; 4]).unwrap());
        let p = enc
            .project(
                &mut g,
                &b,
                &EncodedSequence {
                    embeddings: x,
                    origin: Origin::Text,
                },
            )
            .unwrap();
        let v = g.value(p.embeddings);
        for r in 1..4 {
            assert_eq!(v.row_slice(r), v.row_slice(0));
        }
    }

    #[test]
    fn projection_with_cosine_passes_grad_check() {
        let (store, enc) = setup();
        let x = frames(3, 4);
        let params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let mut inputs = vec![x];
        inputs.extend(params);
        let rep = grad_check(
            "project+cosine",
            |g, v| {
                let b = Bound::from_vars(v[1..].to_vec());
                let e = enc.encode_audio(g, &b, v[0], Origin::QueryAudio)?;
                let p = enc.project(g, &b, &e)?;
                let r0 = g.row(p.embeddings, 0)?;
                let r2 = g.row(p.embeddings, 2)?;
                cosine_similarity(g, r0, r2, 1e-8)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
