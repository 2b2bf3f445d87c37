//! Matching heads and training objectives.
//!
//! The text head reads the query-vs-text cosine matrix (plus rows injected
//! from the memory bank), mixes its rows with self-attention and runs a GRU
//! down the phoneme axis. The audio head max-pools the enrollment-vs-query
//! matrix over query frames and uses the result to attend over the matrix
//! rows. Similarity rows are zero-padded to `max_query_frames` columns so the
//! heads have a fixed input width.

use serde::{Deserialize, Serialize};

use crate::corpus::PhonemeId;
use crate::encoders::{Dense, EncodedSequence, GruIds};
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::numerics::rng;
use crate::numerics::{
    attention_with_weights, cosine_matrix, gru_sequence, Bound, Graph, ParamStore, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub d_proj: usize,
    pub d_attn: usize,
    pub max_query_frames: usize,
    pub inject_count: usize,
    pub focal_gamma: f64,
    pub focal_weight: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig {
            d_proj: 32,
            d_attn: 16,
            max_query_frames: 48,
            inject_count: 4,
            focal_gamma: 2.0,
            focal_weight: 0.25,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl VerifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_proj == 0 || self.d_attn == 0 || self.max_query_frames == 0 {
            return Err(Error::Config(format!("verifier sizes must be positive: {self:?}")));
        }
        if !(self.focal_gamma >= 0.0) || !(self.focal_weight > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "focal gamma >= 0, focal weight > 0 and eps > 0 required: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Final GRU hidden state (`1 × d_attn`), consumed by the fusion layer.
    pub feature: Var,
    /// Posterior in (0, 1).
    pub score: Var,
    /// Three-class logits (text head only).
    pub logits3: Option<Var>,
    /// Attention weights, for inspection.
    pub attention: Var,
}

/// Cosine similarity of every row of `rows` against every row of `cols`.
pub fn similarity_matrix(g: &mut Graph, rows: &EncodedSequence, cols: &EncodedSequence, eps: f64) -> Result<Var> {
    cosine_matrix(g, rows.embeddings, cols.embeddings, eps)
}

/// Appends `count` rows, one per bank vector sampled without replacement
/// (excluding `exclude`), holding its cosine similarity to each query frame.
#[allow(clippy::too_many_arguments)]
pub fn inject_memory_rows(
    g: &mut Graph,
    m: Var,
    bank: &MemoryBank,
    count: usize,
    query: &EncodedSequence,
    exclude: &[PhonemeId],
    seed: u64,
    eps: f64,
) -> Result<Var> {
    if count == 0 {
        return Ok(m);
    }
    if g.shape(query.embeddings)[1] != bank.dim() || g.shape(m)[1] != g.shape(query.embeddings)[0] {
        return Err(Error::Shape {
            op: "inject_memory_rows",
            left: g.shape(m).to_vec(),
            right: g.shape(query.embeddings).to_vec(),
        });
    }
    let picked = bank.sample(count, exclude, seed)?;
    let rows: Vec<Vec<f64>> = picked.into_iter().map(|(_, v)| v).collect();
    let rows = g.constant(Tensor::from_rows(&rows)?);
    let extra = cosine_matrix(g, rows, query.embeddings, eps)?;
    g.concat_rows(&[m, extra])
}

#[derive(Clone, Debug)]
pub struct Verifier {
    cfg: VerifierConfig,
    text_gru: GruIds,
    text_score: Dense,
    text_tri: Dense,
    lift_q: Dense,
    lift_kv: Dense,
    audio_gru: GruIds,
    audio_score: Dense,
    fusion: Dense,
}

impl Verifier {
    pub fn register(cfg: &VerifierConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, &[rng::tag("verifier")]);
        let (t, da) = (cfg.max_query_frames, cfg.d_attn);
        Ok(Verifier {
            cfg: cfg.clone(),
            text_gru: GruIds::register(store, "text_head.gru", t, da, &mut r),
            text_score: Dense::register(store, "text_head.score", da, 1, &mut r),
            text_tri: Dense::register(store, "text_head.tri", da, 3, &mut r),
            lift_q: Dense::register(store, "audio_head.lift_q", 1, da, &mut r),
            lift_kv: Dense::register(store, "audio_head.lift_kv", t, da, &mut r),
            audio_gru: GruIds::register(store, "audio_head.gru", da, da, &mut r),
            audio_score: Dense::register(store, "audio_head.score", da, 1, &mut r),
            fusion: Dense::register(store, "fusion", 2 * da, 1, &mut r),
        })
    }

    pub fn config(&self) -> &VerifierConfig {
        &self.cfg
    }

    fn pad(&self, g: &mut Graph, m: Var) -> Result<Var> {
        let cols = g.shape(m)[1];
        if cols > self.cfg.max_query_frames {
            return Err(Error::Contract(format!(
                "query has {cols} frames, more than max_query_frames = {}",
                self.cfg.max_query_frames
            )));
        }
        g.pad_cols(m, self.cfg.max_query_frames)
    }

    /// `E = M + SelfAttention(M, M, M)`, GRU over the rows of `E`, FC heads.
    pub fn text_head(&self, g: &mut Graph, b: &Bound, m: Var) -> Result<HeadOutput> {
        let mp = self.pad(g, m)?;
        let (att, weights) = attention_with_weights(g, mp, mp, mp)?;
        let e = g.add(mp, att)?;
        let (_, h) = gru_sequence(g, e, &self.text_gru.bind(b))?;
        let logit = self.text_score.apply(g, b, h)?;
        let score = g.sigmoid(logit);
        let logits3 = self.text_tri.apply(g, b, h)?;
        Ok(HeadOutput {
            feature: h,
            score,
            logits3: Some(logits3),
            attention: weights,
        })
    }

    /// Max over query frames gives one query token per enrollment frame;
    /// the lifted rows of the matrix are keys and values.
    pub fn audio_head(&self, g: &mut Graph, b: &Bound, m: Var) -> Result<HeadOutput> {
        let mqa = g.max_cols(m)?;
        let mp = self.pad(g, m)?;
        let q = self.lift_q.apply(g, b, mqa)?;
        let kv = self.lift_kv.apply(g, b, mp)?;
        let (att, weights) = attention_with_weights(g, q, kv, kv)?;
        let e = g.add(q, att)?;
        let (_, h) = gru_sequence(g, e, &self.audio_gru.bind(b))?;
        let logit = self.audio_score.apply(g, b, h)?;
        Ok(HeadOutput {
            feature: h,
            score: g.sigmoid(logit),
            logits3: None,
            attention: weights,
        })
    }

    /// FC over `[text feature | audio feature]` → sigmoid.
    pub fn fuse(&self, g: &mut Graph, b: &Bound, text: Option<&HeadOutput>, audio: Option<&HeadOutput>) -> Result<Var> {
        let (Some(t), Some(a)) = (text, audio) else {
            return Err(Error::Contract("fusion needs both text and audio features".into()));
        };
        let x = g.concat_cols(&[t.feature, a.feature])?;
        let logit = self.fusion.apply(g, b, x)?;
        Ok(g.sigmoid(logit))
    }
}

pub fn bce(g: &mut Graph, score: Var, label: f64) -> Result<Var> {
    g.bce(score, label)
}

pub fn focal_loss(g: &mut Graph, score: Var, label: f64, gamma: f64, weight: f64) -> Result<Var> {
    g.focal(score, label, gamma, weight)
}

/// Softmax cross-entropy over three classes.
pub fn three_class_ce(g: &mut Graph, logits: Var, class: usize) -> Result<Var> {
    if g.shape(logits) != [1, 3] || class > 2 {
        return Err(Error::Shape {
            op: "three_class_ce",
            left: g.shape(logits).to_vec(),
            right: vec![class],
        });
    }
    let lp = g.log_softmax_rows(logits, 1.0)?;
    let picked = g.pick(lp, &[(0, class)])?;
    Ok(g.scale(picked, -1.0))
}

/// Graph handles of the six loss components; `None` means switched off.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub l_uat: Option<Var>,
    pub l_uat3: Option<Var>,
    pub l_clat: Option<Var>,
    pub l_uaa: Option<Var>,
    pub l_claa: Option<Var>,
    pub l_uata: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_uat: f64,
    pub l_uat3: f64,
    pub l_clat: f64,
    pub l_uaa: f64,
    pub l_claa: f64,
    pub l_uata: f64,
    pub l_at: f64,
    pub l_aa: f64,
    pub total: f64,
}

impl LossBundle {
    /// Fills the grouped sums from the six components.
    pub fn from_components(l_uat: f64, l_uat3: f64, l_clat: f64, l_uaa: f64, l_claa: f64, l_uata: f64) -> Self {
        let l_at = l_uat + l_uat3 + l_clat;
        let l_aa = l_uaa + l_claa;
        LossBundle {
            l_uat,
            l_uat3,
            l_clat,
            l_uaa,
            l_claa,
            l_uata,
            l_at,
            l_aa,
            total: l_at + l_aa + l_uata,
        }
    }

    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("l_uat", self.l_uat),
            ("l_uat3", self.l_uat3),
            ("l_clat", self.l_clat),
            ("l_uaa", self.l_uaa),
            ("l_claa", self.l_claa),
            ("l_uata", self.l_uata),
        ]
    }

    pub fn check_sums(&self, tol: f64) -> bool {
        (self.l_at - (self.l_uat + self.l_uat3 + self.l_clat)).abs() <= tol
            && (self.l_aa - (self.l_uaa + self.l_claa)).abs() <= tol
            && (self.total - (self.l_at + self.l_aa + self.l_uata)).abs() <= tol
    }

    pub fn scaled(&self, c: f64) -> Self {
        LossBundle::from_components(
            self.l_uat * c,
            self.l_uat3 * c,
            self.l_clat * c,
            self.l_uaa * c,
            self.l_claa * c,
            self.l_uata * c,
        )
    }

    pub fn add(&self, o: &LossBundle) -> Self {
        LossBundle::from_components(
            self.l_uat + o.l_uat,
            self.l_uat3 + o.l_uat3,
            self.l_clat + o.l_clat,
            self.l_uaa + o.l_uaa,
            self.l_claa + o.l_claa,
            self.l_uata + o.l_uata,
        )
    }
}

/// `L = (L_uat + L_uat3 + L_clat) + (L_uaa + L_claa) + L_uata`, unit weights.
/// Non-finite components abort with the component's name.
pub fn total_loss(g: &mut Graph, parts: &LossVars) -> Result<(Var, LossBundle)> {
    let named = [
        ("l_uat", parts.l_uat),
        ("l_uat3", parts.l_uat3),
        ("l_clat", parts.l_clat),
        ("l_uaa", parts.l_uaa),
        ("l_claa", parts.l_claa),
        ("l_uata", parts.l_uata),
    ];
    let mut vals = [0.0; 6];
    let mut vars = Vec::new();
    for (i, (name, v)) in named.iter().enumerate() {
        if let Some(v) = v {
            if g.shape(*v) != [1, 1] {
                return Err(Error::Contract(format!("loss component {name} is not a scalar")));
            }
            let x = g.value(*v).item();
            if !x.is_finite() {
                return Err(Error::Numerical {
                    component: name.to_string(),
                });
            }
            vals[i] = x;
            vars.push(*v);
        }
    }
    let total = if vars.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let group = |g: &mut Graph, xs: &[Option<Var>]| -> Result<Option<Var>> {
            let xs: Vec<Var> = xs.iter().flatten().copied().collect();
            if xs.is_empty() {
                Ok(None)
            } else {
                Ok(Some(g.add_all(&xs)?))
            }
        };
        let at = group(g, &[parts.l_uat, parts.l_uat3, parts.l_clat])?;
        let aa = group(g, &[parts.l_uaa, parts.l_claa])?;
        group(g, &[at, aa, parts.l_uata])?.expect("non-empty")
    };
    let bundle = LossBundle::from_components(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]);
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Origin;
    use crate::numerics::grad_check;

    fn seq(g: &mut Graph, rows: &[Vec<f64>]) -> EncodedSequence {
        EncodedSequence {
            embeddings: g.constant(Tensor::from_rows(rows).unwrap()),
            origin: Origin::QueryAudio,
        }
    }

    fn small_cfg() -> VerifierConfig {
        VerifierConfig {
            d_proj: 3,
            d_attn: 4,
            max_query_frames: 6,
            ..VerifierConfig::default()
        }
    }

    #[test]
    fn similarity_hand_cases() {
        let mut g = Graph::new();
        let a = seq(&mut g, &[vec![1.0, 2.0]]);
        let m = similarity_matrix(&mut g, &a, &a, 1e-8).unwrap();
        assert!((g.value(m).item() - 1.0).abs() < 1e-12);
        let x = seq(&mut g, &[vec![1.0, 0.0], vec![2.0, 0.0]]);
        let y = seq(&mut g, &[vec![0.0, 3.0]]);
        let m = similarity_matrix(&mut g, &x, &y, 1e-8).unwrap();
        assert_eq!(g.value(m).data(), &[0.0, 0.0]);
        let r = seq(&mut g, &[vec![1.0, 0.0], vec![1.0, 1.0]]);
        let c = seq(&mut g, &[vec![0.0, 1.0], vec![3.0, 4.0], vec![-1.0, 0.0]]);
        let m = similarity_matrix(&mut g, &r, &c, 1e-8).unwrap();
        let s = 0.5f64.sqrt();
        let want = [0.0, 0.6, -1.0, s, 7.0 / 5.0 * s, -s];
        for (a, b) in g.value(m).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        let bad = seq(&mut g, &[vec![1.0, 0.0, 0.0]]);
        assert!(similarity_matrix(&mut g, &r, &bad, 1e-8).is_err());
    }

    #[test]
    fn injection_appends_rows() {
        let mut bank = MemoryBank::new(5, 2, 0.8, true).unwrap();
        for k in 0..5 {
            bank.update(k, &[1.0, k as f64], 1.0, 0.0).unwrap();
        }
        let mut g = Graph::new();
        let q = seq(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 2.0]]);
        let t = seq(&mut g, &[vec![1.0, 0.5], vec![0.2, 1.0], vec![0.0, 1.0]]);
        let m = similarity_matrix(&mut g, &t, &q, 1e-8).unwrap();
        let same = inject_memory_rows(&mut g, m, &bank, 0, &q, &[], 3, 1e-8).unwrap();
        assert_eq!(same, m);
        let out = inject_memory_rows(&mut g, m, &bank, 2, &q, &[], 3, 1e-8).unwrap();
        let (mv, ov) = (g.value(m).clone(), g.value(out).clone());
        assert_eq!(ov.shape(), [5, 4]);
        for r in 0..3 {
            assert_eq!(ov.row_slice(r), mv.row_slice(r));
        }
        let picked = bank.sample(2, &[], 3).unwrap();
        let qrows = g.value(q.embeddings).to_rows();
        for (i, (_, v)) in picked.iter().enumerate() {
            for (c, qr) in qrows.iter().enumerate() {
                let dot: f64 = v.iter().zip(qr).map(|(a, b)| a * b).sum();
                let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!((ov.get(3 + i, c) - dot / (n(v) * n(qr))).abs() < 1e-12);
            }
        }
        assert!(matches!(
            inject_memory_rows(&mut g, m, &bank, 6, &q, &[], 3, 1e-8),
            Err(Error::Sampling { requested: 6, eligible: 5 })
        ));
    }

    fn head_setup() -> (ParamStore, Verifier) {
        let mut store = ParamStore::new();
        let v = Verifier::register(&small_cfg(), &mut store).unwrap();
        (store, v)
    }

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn audio_head_max_pool_cases() {
        let (store, v) = head_setup();
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let col = g.constant(mat(&[vec![0.3], vec![-0.2], vec![0.9]]));
        let mqa = g.max_cols(col).unwrap();
        assert_eq!(g.value(mqa).data(), &[0.3, -0.2, 0.9]);
        let hand = g.constant(mat(&[vec![0.1, 0.7], vec![-0.4, -0.5]]));
        let mqa = g.max_cols(hand).unwrap();
        assert_eq!(g.value(mqa).data(), &[0.7, -0.4]);
        let flat = g.constant(Tensor::filled(3, 4, 0.25));
        let out = v.audio_head(&mut g, &b, flat).unwrap();
        let w = g.value(out.attention);
        for x in w.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = g.value(out.score).item();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn scores_in_open_unit_interval_and_fusion_needs_both() {
        let (store, v) = head_setup();
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let m = g.constant(mat(&[vec![0.9, -0.1, 0.2], vec![0.0, 0.8, 0.3]]));
        let t = v.text_head(&mut g, &b, m).unwrap();
        let a = v.audio_head(&mut g, &b, m).unwrap();
        for s in [t.score, a.score] {
            let x = g.value(s).item();
            assert!(x > 0.0 && x < 1.0);
        }
        let f = v.fuse(&mut g, &b, Some(&t), Some(&a)).unwrap();
        assert!(g.value(f).item() > 0.0 && g.value(f).item() < 1.0);
        assert!(matches!(v.fuse(&mut g, &b, Some(&t), None), Err(Error::Contract(_))));
        let wide = g.constant(Tensor::zeros(2, 7));
        assert!(matches!(v.text_head(&mut g, &b, wide), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_closed_forms() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::scalar(0.5));
        for y in [0.0, 1.0] {
            let l = bce(&mut g, half, y).unwrap();
            assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-7);
        }
        let s = g.constant(Tensor::scalar(0.9));
        let l = bce(&mut g, s, 1.0).unwrap();
        assert!((g.value(l).item() - 0.1053605).abs() < 1e-6);
        let f = focal_loss(&mut g, s, 1.0, 2.0, 1.0).unwrap();
        assert!((g.value(f).item() - 1.0536e-3).abs() < 1e-7);
        for (sv, y) in [(0.9, 1.0), (0.3, 0.0), (0.62, 1.0), (0.05, 1.0)] {
            let s = g.constant(Tensor::scalar(sv));
            let a = bce(&mut g, s, y).unwrap();
            let b = focal_loss(&mut g, s, y, 0.0, 1.0).unwrap();
            assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-9);
        }
        let exact = g.constant(Tensor::scalar(1.0));
        let f = focal_loss(&mut g, exact, 1.0, 2.0, 0.25).unwrap();
        assert!(g.value(f).item().abs() < 1e-6);
    }

    #[test]
    fn three_class_cases() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::row(vec![0.4, 0.4, 0.4]));
        for c in 0..3 {
            let l = three_class_ce(&mut g, u, c).unwrap();
            assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-9);
        }
        let mut prev = f64::INFINITY;
        for z in [0.0, 1.0, 2.5] {
            let x = g.constant(Tensor::row(vec![0.2, z, -0.3]));
            let l = three_class_ce(&mut g, x, 1).unwrap();
            let l = g.value(l).item();
            assert!(l < prev);
            prev = l;
        }
        let sat = g.constant(Tensor::row(vec![60.0, 0.0, 0.0]));
        let l = three_class_ce(&mut g, sat, 0).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn total_loss_sums_and_additivity() {
        let mut g = Graph::new();
        let vals = [0.3, 1.1, 2.5, 0.05, 0.7, 0.41];
        let mk = |g: &mut Graph, v: &[f64; 6]| LossVars {
            l_uat: Some(g.constant(Tensor::scalar(v[0]))),
            l_uat3: Some(g.constant(Tensor::scalar(v[1]))),
            l_clat: Some(g.constant(Tensor::scalar(v[2]))),
            l_uaa: Some(g.constant(Tensor::scalar(v[3]))),
            l_claa: Some(g.constant(Tensor::scalar(v[4]))),
            l_uata: Some(g.constant(Tensor::scalar(v[5]))),
        };
        let parts = mk(&mut g, &vals);
        let (t, bundle) = total_loss(&mut g, &parts).unwrap();
        assert!(bundle.check_sums(1e-9));
        let resum = vals[0] + vals[1] + vals[2] + vals[3] + vals[4] + vals[5];
        assert!((g.value(t).item() - resum).abs() < 1e-9);
        assert!((bundle.total - resum).abs() < 1e-9);
        for i in 0..6 {
            let mut v = vals;
            v[i] += 0.125;
            let p = mk(&mut g, &v);
            let (t2, _) = total_loss(&mut g, &p).unwrap();
            assert!((g.value(t2).item() - g.value(t).item() - 0.125).abs() < 1e-12);
        }
        let zero = mk(&mut g, &[0.0; 6]);
        let (z, zb) = total_loss(&mut g, &zero).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
        assert_eq!(zb.total, 0.0);
        let mut bad = vals;
        bad[4] = f64::NAN;
        let p = mk(&mut g, &bad);
        match total_loss(&mut g, &p) {
            Err(Error::Numerical { component }) => assert_eq!(component, "l_claa"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn heads_and_fusion_pass_grad_check() {
        let (store, v) = head_setup();
        let m = mat(&[vec![0.9, -0.1, 0.2, 0.4], vec![0.0, 0.8, 0.3, -0.6], vec![0.5, 0.1, -0.2, 0.7]]);
        let mut inputs = vec![m];
        inputs.extend(store.iter().map(|(_, t)| {
            // Shift biases off zero so every path is exercised.
            let mut t = t.clone();
            t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 0.01 * ((i % 7) as f64 - 3.0));
            t
        }));
        let rep = grad_check(
            "heads",
            |g, vars| {
                let b = Bound::from_vars(vars[1..].to_vec());
                let t = v.text_head(g, &b, vars[0])?;
                let a = v.audio_head(g, &b, vars[0])?;
                let f = v.fuse(g, &b, Some(&t), Some(&a))?;
                let l1 = bce(g, t.score, 1.0)?;
                let l2 = three_class_ce(g, t.logits3.unwrap(), 2)?;
                let l3 = focal_loss(g, a.score, 0.0, 2.0, 0.25)?;
                let l4 = bce(g, f, 0.0)?;
                g.add_all(&[l1, l2, l3, l4])
            },
            &inputs,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
