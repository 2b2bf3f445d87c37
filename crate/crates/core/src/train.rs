//! Minibatch SGD over the joint objective, with per-epoch hard-negative
//! augmentation, error-driven pair rebalancing and memory bank updates.
//!
//! Every random choice derives from the training seed and the epoch and step
//! counters, so a run resumed from a checkpoint replays the uninterrupted run
//! exactly.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};

use crate::augmentation::{label_tri_class, make_hard_negative, rebalance_pairs, sample_n_edits};
use crate::checkpoint::{Checkpoint, Thresholds};
use crate::config::RunConfig;
use crate::contrastive::{collect_phoneme_batch, info_nce, PhonemePair};
use crate::corpus::{Keyword, PairExample};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::metrics::{auc, eer};
use crate::model::{Mode, Model, PairForward};
use crate::numerics::rng;
use crate::numerics::{Bound, Graph, Tensor, Var};
use crate::verifier::{bce, focal_loss, three_class_ce, total_loss, LossBundle, LossVars};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss components averaged over the epoch's training pairs.
    pub loss: LossBundle,
    pub pairs: usize,
    pub augmented: usize,
    pub bank_rows: usize,
    pub val_auc: Option<f64>,
    pub val_eer: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let l = &self.loss;
        format!(
            "epoch={} pairs={} augmented={} bank_rows={} l_uat={:.6} l_uat3={:.6} l_clat={:.6} \
             l_uaa={:.6} l_claa={:.6} l_uata={:.6} l_at={:.6} l_aa={:.6} total={:.6} val_auc={} val_eer={}",
            self.epoch,
            self.pairs,
            self.augmented,
            self.bank_rows,
            l.l_uat,
            l.l_uat3,
            l.l_clat,
            l.l_uaa,
            l.l_claa,
            l.l_uata,
            l.l_at,
            l.l_aa,
            l.total,
            opt(self.val_auc),
            opt(self.val_eer),
        )
    }
}

pub fn fresh_checkpoint(cfg: &RunConfig, inventory_checksum: &str) -> Result<Checkpoint> {
    Ok(Checkpoint {
        model: Model::new(cfg)?,
        inventory_checksum: inventory_checksum.to_string(),
        epoch: 0,
        velocity: Vec::new(),
        keyword_errors: BTreeMap::new(),
        thresholds: Thresholds::default(),
    })
}

struct StepResult {
    loss: LossBundle,
    /// Per pair: fused score, pooled query rows, query phonemes.
    outcomes: Vec<(f64, Tensor)>,
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<()> {
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical {
            component: "gradient".into(),
        });
    }
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
    Ok(())
}

/// The joint objective of one minibatch, built on `g` with parameters `b`.
/// Returns the total loss node, its components and the per-pair forwards.
pub fn batch_objective(
    model: &Model,
    g: &mut Graph,
    b: &Bound,
    batch: &[&PairExample],
    step_seed: u64,
) -> Result<(Var, LossBundle, Vec<PairForward>)> {
    let tc = &model.cfg.train;
    let vc = model.verifier.config();
    let g = &mut *g;
    let (mut uat, mut uat3, mut uaa, mut uata) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut forwards = Vec::with_capacity(batch.len());
    for (i, p) in batch.iter().enumerate() {
        let f = model.forward_train(g, b, p, rng::derive(step_seed, &[i as u64]), tc.use_memory_bank)?;
        let y = p.label_value();
        uat.push(bce(g, f.text.score, y)?);
        if tc.use_uat3 {
            let logits = f.text.logits3.expect("text head has three-class logits");
            uat3.push(three_class_ce(g, logits, label_tri_class(p))?);
        }
        uaa.push(focal_loss(g, f.audio.score, y, vc.focal_gamma, vc.focal_weight)?);
        uata.push(bce(g, f.fused, y)?);
        forwards.push(f);
    }
    let positives: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].is_positive()).collect();
    let contrastive = |g: &mut Graph, audio_keys: bool| -> Result<Option<Var>> {
        if positives.is_empty() {
            return Ok(None);
        }
        let pairs: Vec<PhonemePair<'_>> = positives
            .iter()
            .map(|&i| {
                let f = &forwards[i];
                PhonemePair {
                    anchors: f.pooled_query.embeddings,
                    keys: if audio_keys {
                        f.pooled_enroll.embeddings
                    } else {
                        f.text_proj
                    },
                    phoneme_ids: &f.pooled_query.phoneme_ids,
                }
            })
            .collect();
        let pb = collect_phoneme_batch(g, &pairs)?;
        Ok(Some(info_nce(g, &pb, &model.cfg.contrastive())?))
    };
    let l_clat = if tc.use_clat { contrastive(g, false)? } else { None };
    let l_claa = if tc.use_claa { contrastive(g, true)? } else { None };
    let mut sum = |v: &[Var]| -> Result<Option<Var>> {
        if v.is_empty() {
            Ok(None)
        } else {
            g.add_all(v).map(Some)
        }
    };
    let parts = LossVars {
        l_uat: sum(&uat)?,
        l_uat3: sum(&uat3)?,
        l_clat,
        l_uaa: sum(&uaa)?,
        l_claa,
        l_uata: sum(&uata)?,
    };
    let (total, bundle) = total_loss(g, &parts)?;
    Ok((total, bundle, forwards))
}

fn train_step(model: &mut Model, velocity: &mut Vec<Tensor>, batch: &[&PairExample], step_seed: u64) -> Result<StepResult> {
    let tc = model.cfg.train.clone();
    let mut g = Graph::new();
    let b = model.store.bind(&mut g);
    let (total, bundle, forwards) = batch_objective(model, &mut g, &b, batch, step_seed)?;
    g.backward(total)?;
    let mut grads = model.store.gradients(&g, &b);
    clip_gradients(&mut grads, tc.grad_clip)?;
    if tc.momentum > 0.0 {
        if velocity.is_empty() {
            *velocity = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
        }
        for (v, g) in velocity.iter_mut().zip(&grads) {
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = tc.momentum * *vv + gv;
            }
        }
        model.store.sgd_step(velocity, tc.lr)?;
    } else {
        model.store.sgd_step(&grads, tc.lr)?;
    }
    let outcomes = forwards
        .iter()
        .map(|f| (g.value(f.fused).item(), g.value(f.pooled_query.embeddings).clone()))
        .collect();
    Ok(StepResult { loss: bundle, outcomes })
}

fn dataset_keywords(ds: &Dataset) -> Vec<Keyword> {
    let mut kws: Vec<Keyword> = ds
        .pairs
        .iter()
        .flat_map(|p| [Some(p.query.phonemes().to_vec()), p.enroll_text.clone()])
        .flatten()
        .collect();
    kws.sort();
    kws.dedup();
    kws
}

/// The pairs seen in one epoch: the training set, rebalanced by the previous
/// epoch's keyword errors, plus fresh augmented hard negatives.
pub fn epoch_pairs(ck: &Checkpoint, train: &Dataset, vocab: &[Keyword], epoch: usize) -> Result<(Vec<PairExample>, usize)> {
    let cfg = &ck.model.cfg;
    let tc = &cfg.train;
    let seed = rng::derive(tc.seed, &[rng::tag("epoch"), epoch as u64]);
    let mut pairs = if tc.rebalance_boost > 0.0 && !ck.keyword_errors.is_empty() {
        rebalance_pairs(
            &train.pairs,
            &ck.keyword_errors,
            tc.rebalance_boost,
            cfg.corpus.hard_threshold,
            rng::derive(seed, &[rng::tag("rebalance")]),
        )?
    } else {
        train.pairs.clone()
    };
    let mut augmented = 0;
    if tc.use_memory_bank && tc.augment_ratio > 0.0 {
        let positives: Vec<&PairExample> = train.pairs.iter().filter(|p| p.is_positive()).collect();
        let n = ((positives.len() as f64) * tc.augment_ratio).round() as usize;
        let mut r = rng::stream(seed, &[rng::tag("augment")]);
        let synth = cfg.synth();
        for i in 0..n {
            let Some(src) = positives.choose(&mut r) else { break };
            let n_edits = sample_n_edits(&mut r);
            let s = rng::derive(seed, &[rng::tag("augment-pair"), i as u64]);
            match make_hard_negative(src, n_edits, &ck.model.bank, &train.inventory, &synth, vocab, s) {
                Ok(neg) => {
                    pairs.push(neg);
                    augmented += 1;
                }
                Err(Error::Augmentation(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    pairs.shuffle(&mut rng::stream(seed, &[rng::tag("shuffle")]));
    Ok((pairs, augmented))
}

fn run_epoch(ck: &mut Checkpoint, train: &Dataset, vocab: &[Keyword]) -> Result<(LossBundle, usize, usize)> {
    let epoch = ck.epoch + 1;
    let (pairs, augmented) = epoch_pairs(ck, train, vocab, epoch)?;
    let tc = ck.model.cfg.train.clone();
    let qthr = ck.model.cfg.model.quality_threshold;
    let mut total = LossBundle::default();
    let mut errors: BTreeMap<Keyword, (usize, usize)> = BTreeMap::new();
    for (step, batch) in pairs.chunks(tc.batch_size).enumerate() {
        let refs: Vec<&PairExample> = batch.iter().collect();
        let step_seed = rng::derive(tc.seed, &[rng::tag("step"), epoch as u64, step as u64]);
        let res = train_step(&mut ck.model, &mut ck.velocity, &refs, step_seed)?;
        debug_assert!(res.loss.check_sums(1e-9));
        total = total.add(&res.loss);
        for (p, (score, pooled)) in batch.iter().zip(&res.outcomes) {
            let y = p.label_value();
            let e = errors.entry(p.query.phonemes().to_vec()).or_default();
            e.0 += usize::from((*score >= 0.5) != p.is_positive());
            e.1 += 1;
            if tc.use_memory_bank {
                let quality = (score - 0.5) * (2.0 * y - 1.0);
                for (row, &id) in p.query.phonemes().iter().enumerate() {
                    ck.model.bank.update(id, pooled.row_slice(row), quality, qthr)?;
                }
            }
        }
    }
    ck.keyword_errors = errors
        .into_iter()
        .map(|(k, (wrong, n))| (k, wrong as f64 / n as f64))
        .collect();
    ck.epoch = epoch;
    Ok((total.scaled(1.0 / pairs.len() as f64), pairs.len(), augmented))
}

/// Trains from `ck.epoch` up to the configured epoch count, or stops early
/// after `stop_after` completed epochs. Validation thresholds are refreshed
/// when the run ends.
pub fn train(
    ck: &mut Checkpoint,
    train: &Dataset,
    val: &Dataset,
    stop_after: Option<usize>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    ck.check_inventory(&train.inventory.checksum())?;
    ck.check_inventory(&val.inventory.checksum())?;
    if train.pairs.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    let vocab = dataset_keywords(train);
    let last = stop_after
        .unwrap_or(usize::MAX)
        .min(ck.model.cfg.train.epochs);
    let mut records = Vec::new();
    while ck.epoch < last {
        let (loss, pairs, augmented) = run_epoch(ck, train, &vocab)?;
        let (val_auc, val_eer) = if val.pairs.is_empty() {
            (None, None)
        } else {
            let s = eval::scored_set(&val.pairs, eval::score_pairs(&ck.model, &val.pairs, Mode::Both)?);
            let (p, n) = s.counts();
            if p > 0 && n > 0 {
                (Some(auc(&s)?), Some(eer(&s)?.0))
            } else {
                (None, None)
            }
        };
        let rec = EpochRecord {
            epoch: ck.epoch,
            loss,
            pairs,
            augmented,
            bank_rows: ck.model.bank.num_initialized(),
            val_auc,
            val_eer,
        };
        on_epoch(&rec);
        records.push(rec);
    }
    if !val.pairs.is_empty() {
        ck.thresholds = eval::thresholds(&ck.model, &val.pairs)?;
    }
    Ok(records)
}
