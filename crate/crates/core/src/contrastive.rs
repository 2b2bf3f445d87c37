//! Phoneme-level InfoNCE over all phonemes of a mini-batch.

use serde::{Deserialize, Serialize};

use crate::corpus::PhonemeId;
use crate::error::{Error, Result};
use crate::numerics::{cosine_matrix, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub eps: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.07,
            eps: 1e-8,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Parameter(format!(
                "contrastive config needs temperature > 0 and eps > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Row `i` of `anchors` and row `i` of `keys` are the same phoneme occurrence.
#[derive(Clone, Debug)]
pub struct PhonemeBatch {
    pub anchors: Var,
    pub keys: Var,
    pub phoneme_ids: Vec<PhonemeId>,
    pub pair_index: Vec<usize>,
}

impl PhonemeBatch {
    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }
}

/// One mini-batch item: pooled query phonemes, the matching key phonemes
/// (text or pooled enrollment audio), and their ids.
#[derive(Clone, Copy, Debug)]
pub struct PhonemePair<'a> {
    pub anchors: Var,
    pub keys: Var,
    pub phoneme_ids: &'a [PhonemeId],
}

/// Concatenates the phonemes of every pair in batch order, then phoneme order.
pub fn collect_phoneme_batch(g: &mut Graph, pairs: &[PhonemePair<'_>]) -> Result<PhonemeBatch> {
    if pairs.is_empty() {
        return Err(Error::Contract("empty phoneme batch".into()));
    }
    let mut anchors = Vec::with_capacity(pairs.len());
    let mut keys = Vec::with_capacity(pairs.len());
    let mut ids = Vec::new();
    let mut pair_index = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let (na, nk) = (g.shape(p.anchors)[0], g.shape(p.keys)[0]);
        if na != nk || na != p.phoneme_ids.len() {
            return Err(Error::Alignment(format!(
                "pair {i}: {na} anchor rows, {nk} key rows, {} phoneme ids",
                p.phoneme_ids.len()
            )));
        }
        anchors.push(p.anchors);
        keys.push(p.keys);
        ids.extend_from_slice(p.phoneme_ids);
        pair_index.extend(std::iter::repeat_n(i, na));
    }
    Ok(PhonemeBatch {
        anchors: g.concat_rows(&anchors)?,
        keys: g.concat_rows(&keys)?,
        phoneme_ids: ids,
        pair_index,
    })
}

/// `−Σ_i log softmax_j(cos(a_i, k_j)/τ)[i]`; the denominator includes `j = i`.
pub fn info_nce(g: &mut Graph, batch: &PhonemeBatch, cfg: &ContrastiveConfig) -> Result<Var> {
    cfg.validate()?;
    let n = g.shape(batch.anchors)[0];
    if n == 0 || g.shape(batch.keys)[0] != n {
        return Err(Error::Contract(format!(
            "InfoNCE needs equal, non-zero anchor and key counts, got {:?} and {:?}",
            g.shape(batch.anchors),
            g.shape(batch.keys)
        )));
    }
    let sim = cosine_matrix(g, batch.anchors, batch.keys, cfg.eps)?;
    let logp = g.log_softmax_rows(sim, cfg.temperature)?;
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let picked = g.pick(logp, &diag)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}
