//! Hard negatives by phoneme edits, three-class labels, and pair
//! rebalancing toward poorly recognized keywords.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::corpus::{
    levenshtein, synthesize_with_speaker, Difficulty, Keyword, MatchLabel, PairExample, PhonemeId,
    PhonemeInventory, SynthConfig, TriLabel,
};
use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;
use crate::numerics::rng::{self, Rng};

const MAX_REPLANS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EditOp {
    Insert,
    Replace,
    Delete,
}

pub const ALL_OPS: [EditOp; 3] = [EditOp::Insert, EditOp::Replace, EditOp::Delete];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EditPlan {
    pub op: EditOp,
    pub position: usize,
    /// Inserted or replacing phoneme; `None` for deletes.
    pub phoneme_id: Option<PhonemeId>,
}

pub fn apply_edit(seq: &[PhonemeId], plan: &EditPlan) -> Result<Keyword> {
    let mut out = seq.to_vec();
    match (plan.op, plan.phoneme_id) {
        (EditOp::Insert, Some(p)) if plan.position <= out.len() => out.insert(plan.position, p),
        (EditOp::Replace, Some(p)) if plan.position < out.len() && out[plan.position] != p => {
            out[plan.position] = p
        }
        (EditOp::Delete, None) if plan.position < out.len() && out.len() > 1 => {
            out.remove(plan.position);
        }
        _ => {
            return Err(Error::Augmentation(format!(
                "edit {plan:?} is not applicable to a sequence of length {}",
                seq.len()
            )))
        }
    }
    Ok(out)
}

/// Draws one feasible edit; new phonemes come from the memory bank.
fn plan_edit(seq: &[PhonemeId], bank: &MemoryBank, ops: &[EditOp], r: &mut Rng) -> Result<EditPlan> {
    let feasible: Vec<EditOp> = ops
        .iter()
        .copied()
        .filter(|op| match op {
            EditOp::Delete => seq.len() > 1,
            EditOp::Insert => !bank.eligible(&[]).is_empty(),
            EditOp::Replace => seq.iter().any(|p| !bank.eligible(&[*p]).is_empty()),
        })
        .collect();
    let op = *feasible
        .choose(r)
        .ok_or_else(|| Error::Augmentation(format!("no feasible edit among {ops:?}")))?;
    let plan = match op {
        EditOp::Delete => EditPlan {
            op,
            position: r.random_range(0..seq.len()),
            phoneme_id: None,
        },
        EditOp::Insert => {
            let p = bank.sample(1, &[], r.random())?[0].0;
            EditPlan {
                op,
                position: r.random_range(0..=seq.len()),
                phoneme_id: Some(p),
            }
        }
        EditOp::Replace => {
            let positions: Vec<usize> = (0..seq.len())
                .filter(|&i| !bank.eligible(&[seq[i]]).is_empty())
                .collect();
            let position = *positions.choose(r).expect("feasible replace position");
            let p = bank.sample(1, &[seq[position]], r.random())?[0].0;
            EditPlan {
                op,
                position,
                phoneme_id: Some(p),
            }
        }
    };
    Ok(plan)
}

/// Applies `n_edits` sampled edits restricted to `ops`, replanning (bounded)
/// until the result is 1..=n_edits edits away and collides with no keyword
/// in `forbidden`.
pub fn edit_sequence(
    seq: &[PhonemeId],
    n_edits: usize,
    bank: &MemoryBank,
    ops: &[EditOp],
    forbidden: &[Keyword],
    seed: u64,
) -> Result<(Keyword, Vec<EditPlan>)> {
    if n_edits == 0 {
        return Err(Error::Augmentation("n_edits must be at least 1".into()));
    }
    for attempt in 0..MAX_REPLANS {
        let mut r = rng::stream(seed, &[rng::tag("edit"), attempt as u64]);
        let mut cur = seq.to_vec();
        let mut plans = Vec::with_capacity(n_edits);
        let mut ok = true;
        for _ in 0..n_edits {
            match plan_edit(&cur, bank, ops, &mut r) {
                Ok(plan) => {
                    cur = apply_edit(&cur, &plan)?;
                    plans.push(plan);
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let d = levenshtein(seq, &cur);
        if d >= 1 && d <= n_edits && !forbidden.contains(&cur) {
            return Ok((cur, plans));
        }
    }
    Err(Error::Augmentation(format!(
        "no valid {n_edits}-edit variant of a {}-phoneme sequence after {MAX_REPLANS} attempts",
        seq.len()
    )))
}

/// One edit with probability 0.7, else two.
pub fn sample_n_edits(r: &mut Rng) -> usize {
    if r.random_bool(0.7) {
        1
    } else {
        2
    }
}

/// Edits the enrollment of a positive pair into a confusable negative and
/// synthesizes a fresh enrollment utterance for it.
pub fn make_hard_negative(
    positive: &PairExample,
    n_edits: usize,
    bank: &MemoryBank,
    inv: &PhonemeInventory,
    synth: &SynthConfig,
    vocab: &[Keyword],
    seed: u64,
) -> Result<PairExample> {
    if !positive.is_positive() {
        return Err(Error::Augmentation("source pair is not a positive".into()));
    }
    let source = positive.enrolled_keyword().to_vec();
    let (edited, _) = edit_sequence(&source, n_edits, bank, &ALL_OPS, vocab, seed)?;
    let audio = synthesize_with_speaker(inv, &edited, synth, rng::derive(seed, &[rng::tag("aug-audio")]))?;
    Ok(PairExample {
        query: positive.query.clone(),
        enroll_text: Some(edited),
        enroll_audio: Some(audio),
        match_label: MatchLabel::Negative,
        tri_label: TriLabel::AugmentedHardNegative,
        difficulty: Some(Difficulty::Hard),
    })
}

/// 0 positive, 1 easy negative, 2 hard negative (natural or augmented).
pub fn label_tri_class(pair: &PairExample) -> usize {
    match (pair.match_label, pair.tri_label, pair.difficulty) {
        (MatchLabel::Positive, _, _) => 0,
        (_, TriLabel::AugmentedHardNegative, _) | (_, _, Some(Difficulty::Hard)) => 2,
        _ => 1,
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// For every keyword whose error rate is above the median, appends
/// `round(boost × count)` negatives pairing its existing query utterances
/// with existing enrollments of its nearest keywords by edit distance.
/// `count` is the number of pairs whose query is that keyword.
pub fn rebalance_pairs(
    pairs: &[PairExample],
    per_keyword_error: &BTreeMap<Keyword, f64>,
    boost_factor: f64,
    hard_threshold: usize,
    seed: u64,
) -> Result<Vec<PairExample>> {
    let mut out = pairs.to_vec();
    if per_keyword_error.is_empty() || !(boost_factor > 0.0) {
        return Ok(out);
    }
    if per_keyword_error.values().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(Error::Contract("keyword error rates must lie in [0, 1]".into()));
    }
    let errors: Vec<f64> = per_keyword_error.values().copied().collect();
    let med = median(&errors);

    let mut queries: BTreeMap<&[PhonemeId], Vec<usize>> = BTreeMap::new();
    let mut enrolls: BTreeMap<&[PhonemeId], Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        queries.entry(p.query.phonemes()).or_default().push(i);
        if p.enroll_audio.is_some() && p.enroll_text.is_some() {
            enrolls.entry(p.enrolled_keyword()).or_default().push(i);
        }
    }
    let mut r = rng::stream(seed, &[rng::tag("rebalance")]);
    for (kw, &err) in per_keyword_error {
        if err <= med {
            continue;
        }
        let Some(q_idx) = queries.get(kw.as_slice()) else {
            continue;
        };
        let best = enrolls
            .keys()
            .filter(|k| **k != kw.as_slice())
            .map(|k| levenshtein(kw, k))
            .min();
        let Some(best) = best else { continue };
        let neighbors: Vec<&[PhonemeId]> = enrolls
            .keys()
            .filter(|k| **k != kw.as_slice() && levenshtein(kw, k) == best)
            .copied()
            .collect();
        let extra = (boost_factor * q_idx.len() as f64).round() as usize;
        for j in 0..extra {
            let q = &pairs[q_idx[r.random_range(0..q_idx.len())]];
            let nb = neighbors[j % neighbors.len()];
            let pool = &enrolls[nb];
            let e = &pairs[pool[r.random_range(0..pool.len())]];
            out.push(PairExample {
                query: q.query.clone(),
                enroll_text: Some(nb.to_vec()),
                enroll_audio: e.enroll_audio.clone(),
                match_label: MatchLabel::Negative,
                tri_label: TriLabel::NaturalNegative,
                difficulty: Some(if best <= hard_threshold {
                    Difficulty::Hard
                } else {
                    Difficulty::Easy
                }),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_pairs, PairCounts};

    fn bank(k: usize) -> MemoryBank {
        let mut b = MemoryBank::new(k, 2, 0.8, true).unwrap();
        for i in 0..k {
            b.update(i, &[1.0, i as f64], 1.0, 0.0).unwrap();
        }
        b
    }

    #[test]
    fn single_edits() {
        let b = bank(10);
        let seq = vec![1, 2, 3, 4];
        for seed in 0..20 {
            let (e, plans) = edit_sequence(&seq, 1, &b, &[EditOp::Replace], &[], seed).unwrap();
            assert_eq!(levenshtein(&seq, &e), 1);
            assert_eq!(plans[0].op, EditOp::Replace);
            let (e, _) = edit_sequence(&seq, 1, &b, &[EditOp::Insert], &[], seed).unwrap();
            assert_eq!(e.len(), seq.len() + 1);
            let (e, _) = edit_sequence(&seq, 1, &b, &[EditOp::Delete], &[], seed).unwrap();
            assert_eq!(e.len(), seq.len() - 1);
        }
    }

    #[test]
    fn two_edits_within_bounds() {
        let b = bank(10);
        let seq = vec![5, 1, 7];
        for seed in 0..50 {
            let (e, _) = edit_sequence(&seq, 2, &b, &ALL_OPS, &[], seed).unwrap();
            let d = levenshtein(&seq, &e);
            assert!((1..=2).contains(&d));
        }
    }

    #[test]
    fn infeasible_edits_fail_after_replanning() {
        let b = MemoryBank::new(4, 2, 0.8, true).unwrap();
        let err = edit_sequence(&[2], 1, &b, &ALL_OPS, &[], 1).unwrap_err();
        assert!(matches!(err, Error::Augmentation(_)));
        assert!(apply_edit(&[3], &EditPlan { op: EditOp::Delete, position: 0, phoneme_id: None }).is_err());
        assert!(apply_edit(&[3, 4], &EditPlan { op: EditOp::Replace, position: 0, phoneme_id: Some(3) }).is_err());
    }

    #[test]
    fn collisions_are_avoided() {
        let b = bank(3);
        let seq = vec![0, 1];
        // Every single replace of [0, 1] over ids {0, 1, 2} except one is forbidden.
        let forbidden = vec![vec![1, 1], vec![2, 1], vec![0, 0]];
        for seed in 0..10 {
            let (e, _) = edit_sequence(&seq, 1, &b, &[EditOp::Replace], &forbidden, seed).unwrap();
            assert_eq!(e, vec![0, 2]);
        }
    }

    fn tiny_pairs() -> (PhonemeInventory, Vec<Keyword>, Vec<PairExample>) {
        let inv = PhonemeInventory::generate(10, 4, 0.5, 2).unwrap();
        let vocab = vec![vec![0, 1, 2], vec![0, 1, 3], vec![5, 6, 7, 8], vec![9, 4, 2, 1]];
        let pairs = build_pairs(
            &vocab,
            &inv,
            &SynthConfig::default(),
            PairCounts {
                positives: 8,
                easy: 6,
                hard: 4,
            },
            2,
            3,
        )
        .unwrap();
        (inv, vocab, pairs)
    }

    #[test]
    fn hard_negative_labels_and_audio() {
        let (inv, vocab, pairs) = tiny_pairs();
        let b = bank(10);
        let pos = pairs.iter().find(|p| p.is_positive()).unwrap();
        let neg = make_hard_negative(pos, 1, &b, &inv, &SynthConfig::default(), &vocab, 4).unwrap();
        neg.validate().unwrap();
        assert_eq!(neg.tri_label, TriLabel::AugmentedHardNegative);
        assert_eq!(label_tri_class(&neg), 2);
        let text = neg.enroll_text.as_ref().unwrap();
        assert_eq!(neg.enroll_audio.as_ref().unwrap().phonemes(), text.as_slice());
        assert!(!vocab.contains(text));
        assert_eq!(neg.query, pos.query);
        let not_pos = pairs.iter().find(|p| !p.is_positive()).unwrap();
        assert!(make_hard_negative(not_pos, 1, &b, &inv, &SynthConfig::default(), &vocab, 4).is_err());
    }

    #[test]
    fn tri_class_labels() {
        let (_, _, pairs) = tiny_pairs();
        for p in &pairs {
            let want = match (p.is_positive(), p.difficulty) {
                (true, _) => 0,
                (false, Some(Difficulty::Easy)) => 1,
                _ => 2,
            };
            assert_eq!(label_tri_class(p), want);
        }
    }

    #[test]
    fn rebalance_cases() {
        let (_, vocab, pairs) = tiny_pairs();
        let flat: BTreeMap<Keyword, f64> = vocab.iter().map(|k| (k.clone(), 0.3)).collect();
        assert_eq!(rebalance_pairs(&pairs, &flat, 2.0, 2, 1).unwrap(), pairs);
        let mut one = flat.clone();
        one.insert(vocab[0].clone(), 1.0);
        assert_eq!(rebalance_pairs(&pairs, &one, 0.0, 2, 1).unwrap(), pairs);
        let out = rebalance_pairs(&pairs, &one, 2.0, 2, 1).unwrap();
        let count = |ps: &[PairExample]| ps.iter().filter(|p| p.query.phonemes() == vocab[0].as_slice()).count();
        assert!(count(&out) >= 2 * count(&pairs));
        assert_eq!(&out[..pairs.len()], pairs.as_slice());
        for p in &out[pairs.len()..] {
            p.validate().unwrap();
            // Nearest neighbor of [0,1,2] is [0,1,3], one edit away.
            assert_eq!(p.enroll_text.as_deref(), Some(&[0, 1, 3][..]));
            assert_eq!(p.difficulty, Some(Difficulty::Hard));
        }
        assert_eq!(out, rebalance_pairs(&pairs, &one, 2.0, 2, 1).unwrap());
    }
}
