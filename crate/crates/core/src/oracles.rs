//! Self-checks with known answers: finite-difference gradients for every graph
//! op and for the whole training objective, closed-form loss values, the bank
//! momentum recursion, metric brute forces and an exhaustive edit-distance
//! comparison. Shared by the test suites and the `selftest` command.

use rand::Rng as _;

use crate::config::RunConfig;
use crate::contrastive::{collect_phoneme_batch, info_nce, ContrastiveConfig, PhonemePair};
use crate::corpus::{levenshtein, synthesize_with_speaker, MatchLabel, PairExample, PhonemeInventory, TriLabel, Difficulty};
use crate::error::Result;
use crate::memory_bank::MemoryBank;
use crate::metrics::{auc, eer, ScoredSet};
use crate::model::Model;
use crate::numerics::{
    attention, cosine_matrix, grad_check, gru_sequence, linear, rng, Bound, GradCheckReport, Graph, GruVars, Tensor, Var,
};
use crate::train::batch_objective;
use crate::verifier::{bce, focal_loss, three_class_ce};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;

/// One named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A differentiable op under test: a scalar function of its inputs and the
/// inputs to check it at.
pub struct OpCase {
    pub name: &'static str,
    pub f: OpFn,
    pub inputs: Vec<Tensor>,
}

fn uniform(r: &mut rng::Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Entries with magnitude in [0.1, 1.5], away from the relu kink.
fn off_zero(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = r.random_range(0.1..1.5);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Rows whose entries are distinct with gaps ≥ 0.1, so the max is stable.
fn distinct_rows(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut vals: Vec<f64> = (0..cols).map(|j| j as f64 * 0.3 + r.random_range(0.0..0.1)).collect();
        for i in (1..cols).rev() {
            let j = r.random_range(0..=i);
            vals.swap(i, j);
        }
        data.extend(vals);
    }
    Tensor::new(rows, cols, data).expect("shape")
}

/// Contracts an op output to a scalar with fixed random weights, so every
/// output entry contributes a distinct gradient.
fn weighted(f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static, wseed: u64) -> OpFn {
    Box::new(move |g, v| {
        let out = f(g, v)?;
        let [r, c] = g.shape(out);
        let w = g.constant(uniform(&mut rng::stream(wseed, &[]), r, c, -1.0, 1.0));
        let p = g.mul(out, w)?;
        Ok(g.sum(p))
    })
}

/// Every differentiable op, with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng::stream(seed, &[rng::tag("op-inputs")]);
    let ws = rng::derive(seed, &[rng::tag("op-weights")]);
    let mut cases = Vec::new();
    let mut add = |name: &'static str, f: OpFn, inputs: Vec<Tensor>| cases.push(OpCase { name, f, inputs });
    let u = |r: &mut rng::Rng, a, b| uniform(r, a, b, -1.0, 1.0);

    add("matmul", weighted(|g, v| g.matmul(v[0], v[1]), ws), vec![u(&mut r, 3, 4), u(&mut r, 4, 2)]);
    add("matmul_bt", weighted(|g, v| g.matmul_bt(v[0], v[1]), ws), vec![u(&mut r, 3, 4), u(&mut r, 5, 4)]);
    add("add", weighted(|g, v| g.add(v[0], v[1]), ws), vec![u(&mut r, 2, 3), u(&mut r, 2, 3)]);
    add("sub", weighted(|g, v| g.sub(v[0], v[1]), ws), vec![u(&mut r, 2, 3), u(&mut r, 2, 3)]);
    add("mul", weighted(|g, v| g.mul(v[0], v[1]), ws), vec![u(&mut r, 2, 3), u(&mut r, 2, 3)]);
    add("add_row", weighted(|g, v| g.add_row(v[0], v[1]), ws), vec![u(&mut r, 3, 4), u(&mut r, 1, 4)]);
    add("scale", weighted(|g, v| Ok(g.scale(v[0], -1.7)), ws), vec![u(&mut r, 2, 3)]);
    add("add_scalar", weighted(|g, v| Ok(g.add_scalar(v[0], 0.4)), ws), vec![u(&mut r, 2, 3)]);
    add("sigmoid", weighted(|g, v| Ok(g.sigmoid(v[0])), ws), vec![uniform(&mut r, 2, 3, -3.0, 3.0)]);
    add("tanh", weighted(|g, v| Ok(g.tanh(v[0])), ws), vec![uniform(&mut r, 2, 3, -2.0, 2.0)]);
    add("relu", weighted(|g, v| Ok(g.relu(v[0])), ws), vec![off_zero(&mut r, 3, 3)]);
    add("exp", weighted(|g, v| Ok(g.exp(v[0])), ws), vec![u(&mut r, 2, 3)]);
    add("ln", weighted(|g, v| Ok(g.ln(v[0])), ws), vec![uniform(&mut r, 2, 3, 0.2, 2.0)]);
    add("sum", Box::new(|g, v| Ok(g.sum(v[0]))), vec![u(&mut r, 2, 3)]);
    add(
        "mean",
        Box::new(|g, v| {
            let e = g.exp(v[0]);
            Ok(g.mean(e))
        }),
        vec![u(&mut r, 2, 3)],
    );
    add("add_all", weighted(|g, v| g.add_all(v), ws), vec![u(&mut r, 2, 2), u(&mut r, 2, 2), u(&mut r, 2, 2)]);
    add("concat_rows", weighted(|g, v| g.concat_rows(v), ws), vec![u(&mut r, 1, 3), u(&mut r, 2, 3)]);
    add("concat_cols", weighted(|g, v| g.concat_cols(v), ws), vec![u(&mut r, 2, 1), u(&mut r, 2, 3)]);
    add("slice_rows", weighted(|g, v| g.slice_rows(v[0], 1, 3), ws), vec![u(&mut r, 4, 2)]);
    add("row", weighted(|g, v| g.row(v[0], 2), ws), vec![u(&mut r, 3, 3)]);
    add("slice_cols", weighted(|g, v| g.slice_cols(v[0], 1, 3), ws), vec![u(&mut r, 2, 4)]);
    add("gather", weighted(|g, v| g.gather(v[0], &[2, 0, 2, 1]), ws), vec![u(&mut r, 3, 2)]);
    add("transpose", weighted(|g, v| Ok(g.transpose(v[0])), ws), vec![u(&mut r, 2, 3)]);
    add("softmax_rows", weighted(|g, v| g.softmax_rows(v[0], 0.7), ws), vec![uniform(&mut r, 3, 4, -2.0, 2.0)]);
    add(
        "log_softmax_rows",
        weighted(|g, v| g.log_softmax_rows(v[0], 0.7), ws),
        vec![uniform(&mut r, 3, 4, -2.0, 2.0)],
    );
    add(
        "layer_norm",
        weighted(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), ws),
        vec![uniform(&mut r, 3, 4, -2.0, 2.0), uniform(&mut r, 1, 4, 0.5, 1.5), u(&mut r, 1, 4)],
    );
    add(
        "normalize_rows",
        weighted(|g, v| g.normalize_rows(v[0], 1e-8), ws),
        vec![off_zero(&mut r, 3, 4)],
    );
    add("max_cols", weighted(|g, v| g.max_cols(v[0]), ws), vec![distinct_rows(&mut r, 3, 5)]);
    add(
        "mean_spans",
        weighted(|g, v| g.mean_spans(v[0], &[(0, 2), (2, 3), (3, 6)]), ws),
        vec![u(&mut r, 6, 3)],
    );
    add("pad_cols", weighted(|g, v| g.pad_cols(v[0], 5), ws), vec![u(&mut r, 2, 3)]);
    add("pick", weighted(|g, v| g.pick(v[0], &[(0, 1), (2, 0), (0, 1)]), ws), vec![u(&mut r, 3, 2)]);
    add(
        "gru_cell",
        weighted(|g, v| g.gru_cell(v[0], v[1], v[2], v[3]), ws),
        vec![u(&mut r, 1, 9), u(&mut r, 1, 3), u(&mut r, 3, 9), u(&mut r, 1, 9)],
    );
    add("bce", Box::new(|g, v| g.bce(v[0], 1.0)), vec![uniform(&mut r, 1, 1, 0.05, 0.95)]);
    add("bce_negative", Box::new(|g, v| g.bce(v[0], 0.0)), vec![uniform(&mut r, 1, 1, 0.05, 0.95)]);
    add("focal", Box::new(|g, v| g.focal(v[0], 1.0, 2.0, 0.25)), vec![uniform(&mut r, 1, 1, 0.05, 0.95)]);
    add(
        "focal_negative",
        Box::new(|g, v| g.focal(v[0], 0.0, 2.0, 0.25)),
        vec![uniform(&mut r, 1, 1, 0.05, 0.95)],
    );
    add(
        "cosine_matrix",
        weighted(|g, v| cosine_matrix(g, v[0], v[1], 1e-8), ws),
        vec![off_zero(&mut r, 3, 4), off_zero(&mut r, 2, 4)],
    );
    add(
        "attention",
        weighted(|g, v| attention(g, v[0], v[1], v[2]), ws),
        vec![u(&mut r, 2, 3), u(&mut r, 4, 3), u(&mut r, 4, 2)],
    );
    add(
        "gru_sequence",
        weighted(
            |g, v| {
                let p = GruVars {
                    wx: v[1],
                    wh: v[2],
                    bx: v[3],
                    bh: v[4],
                };
                Ok(gru_sequence(g, v[0], &p)?.0)
            },
            ws,
        ),
        vec![u(&mut r, 4, 2), u(&mut r, 2, 9), u(&mut r, 3, 9), u(&mut r, 1, 9), u(&mut r, 1, 9)],
    );
    add(
        "linear",
        weighted(|g, v| linear(g, v[0], v[1], v[2]), ws),
        vec![u(&mut r, 3, 2), u(&mut r, 2, 4), u(&mut r, 1, 4)],
    );
    add(
        "three_class_ce",
        Box::new(|g, v| three_class_ce(g, v[0], 2)),
        vec![uniform(&mut r, 1, 3, -2.0, 2.0)],
    );
    add(
        "info_nce",
        Box::new(|g, v| {
            let ids = [0, 1, 2, 3];
            let pb = collect_phoneme_batch(
                g,
                &[PhonemePair {
                    anchors: v[0],
                    keys: v[1],
                    phoneme_ids: &ids,
                }],
            )?;
            info_nce(g, &pb, &ContrastiveConfig { temperature: 0.5, eps: 1e-8 })
        }),
        vec![off_zero(&mut r, 4, 3), off_zero(&mut r, 4, 3)],
    );
    cases
}

pub fn check_ops(seed: u64) -> Result<Vec<GradCheckReport>> {
    op_cases(seed)
        .into_iter()
        .map(|c| grad_check(c.name, c.f, &c.inputs, STEP, OP_TOLERANCE))
        .collect()
}

/// A deliberately small model and a two-pair batch (one positive, one hard
/// negative) for checking gradients of the whole objective.
pub fn tiny_problem(seed: u64) -> Result<(Model, Vec<PairExample>)> {
    let mut cfg = RunConfig::default();
    cfg.corpus.k = 6;
    cfg.corpus.d_in = 3;
    cfg.corpus.separation = 0.5;
    cfg.corpus.len_min = 2;
    cfg.corpus.len_max = 3;
    cfg.corpus.dur_min = 1;
    cfg.corpus.dur_max = 2;
    cfg.model.d_model = 4;
    cfg.model.d_proj = 3;
    cfg.model.d_attn = 3;
    cfg.model.max_query_frames = 6;
    cfg.model.inject_count = 2;
    cfg.train.seed = seed;
    let mut model = Model::new(&cfg)?;
    let mut r = rng::stream(seed, &[rng::tag("tiny-bank")]);
    for k in [0, 4, 5] {
        let row: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        model.bank.set_row(k, &row)?;
    }
    let inv = PhonemeInventory::generate(6, 3, 0.5, seed)?;
    let synth = cfg.synth();
    let utt = |ids: &[usize], tag: &str| synthesize_with_speaker(&inv, ids, &synth, rng::derive(seed, &[rng::tag(tag)]));
    let pos = PairExample {
        query: utt(&[1, 2, 3], "q0")?,
        enroll_text: Some(vec![1, 2, 3]),
        enroll_audio: Some(utt(&[1, 2, 3], "e0")?),
        match_label: MatchLabel::Positive,
        tri_label: TriLabel::Positive,
        difficulty: None,
    };
    let neg = PairExample {
        query: utt(&[2, 3], "q1")?,
        enroll_text: Some(vec![2, 1]),
        enroll_audio: Some(utt(&[2, 1], "e1")?),
        match_label: MatchLabel::Negative,
        tri_label: TriLabel::AugmentedHardNegative,
        difficulty: Some(Difficulty::Hard),
    };
    Ok((model, vec![pos, neg]))
}

/// Finite-difference check of the full joint objective on a two-pair batch,
/// over every model parameter.
pub fn check_full_model(seed: u64) -> Result<GradCheckReport> {
    let (model, pairs) = tiny_problem(seed)?;
    let inputs: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let step_seed = rng::derive(seed, &[rng::tag("tiny-step")]);
    grad_check(
        "full_objective",
        |g, vars| {
            let b = Bound::from_vars(vars.to_vec());
            let refs: Vec<&PairExample> = pairs.iter().collect();
            Ok(batch_objective(&model, g, &b, &refs, step_seed)?.0)
        },
        &inputs,
        STEP,
        MODEL_TOLERANCE,
    )
}

fn scalar_of(f: impl Fn(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

/// Closed-form loss values: InfoNCE with one and two phonemes, focal at
/// γ = 0 against BCE, and uniform three-class cross-entropy.
pub fn closed_form_losses() -> Result<Vec<Check>> {
    let nce = |a: Vec<Vec<f64>>, k: Vec<Vec<f64>>| {
        scalar_of(|g| {
            let ids: Vec<usize> = (0..a.len()).collect();
            let av = g.constant(Tensor::from_rows(&a)?);
            let kv = g.constant(Tensor::from_rows(&k)?);
            let pb = collect_phoneme_batch(
                g,
                &[PhonemePair {
                    anchors: av,
                    keys: kv,
                    phoneme_ids: &ids,
                }],
            )?;
            info_nce(g, &pb, &ContrastiveConfig { temperature: 1.0, eps: 1e-8 })
        })
    };
    let mut out = Vec::new();
    let n1 = nce(vec![vec![0.3, -1.0, 2.0]], vec![vec![-0.5, 0.2, 0.9]])?;
    out.push(Check::new("info_nce_single", n1 == 0.0, format!("{:e}", n1 + 0.0)));

    let n2 = nce(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    out.push(Check::new(
        "info_nce_orthogonal_pair",
        (n2 - want).abs() <= 1e-5,
        format!("{n2:.12} vs {want:.12}"),
    ));

    let mut worst: f64 = 0.0;
    for i in 1..20 {
        let p = i as f64 / 20.0;
        for y in [0.0, 1.0] {
            let f = scalar_of(|g| {
                let s = g.constant(Tensor::scalar(p));
                focal_loss(g, s, y, 0.0, 1.0)
            })?;
            let b = scalar_of(|g| {
                let s = g.constant(Tensor::scalar(p));
                bce(g, s, y)
            })?;
            worst = worst.max((f - b).abs());
        }
    }
    out.push(Check::new("focal_gamma0_is_bce", worst <= 1e-9, format!("max diff {worst:e}")));

    let mut worst: f64 = 0.0;
    for class in 0..3 {
        let ce = scalar_of(|g| {
            let l = g.constant(Tensor::row(vec![0.7, 0.7, 0.7]));
            three_class_ce(g, l, class)
        })?;
        worst = worst.max((ce - 3f64.ln()).abs());
    }
    out.push(Check::new("uniform_ce_is_log3", worst <= 1e-9, format!("max diff {worst:e}")));
    Ok(out)
}

/// `‖p_k − p_new‖` after n momentum updates equals `α^n` times its start.
pub fn bank_convergence(seed: u64) -> Result<Check> {
    let mut r = rng::stream(seed, &[rng::tag("bank-oracle")]);
    let dim = 5;
    let mut bank = MemoryBank::new(3, dim, 0.8, false)?;
    let p0: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
    let target: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
    bank.set_row(1, &p0)?;
    let dist = |a: &[f64]| a.iter().zip(&target).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let d0 = dist(&p0);
    let mut worst: f64 = 0.0;
    for n in 1..=40 {
        bank.update(1, &target, 1.0, 0.0)?;
        let want = 0.8f64.powi(n) * d0;
        worst = worst.max((dist(bank.row(1)) - want).abs());
    }
    Ok(Check::new("bank_geometric_convergence", worst <= 1e-9, format!("max deviation {worst:e}")))
}

/// The bank is not a trainable parameter: a training objective's gradients
/// leave it untouched and no parameter carries its shape under a bank name.
pub fn bank_has_no_gradient(seed: u64) -> Result<Check> {
    let (model, pairs) = tiny_problem(seed)?;
    let before = model.bank.clone();
    let mut g = Graph::new();
    let b = model.store.bind(&mut g);
    let refs: Vec<&PairExample> = pairs.iter().collect();
    let (total, _, _) = batch_objective(&model, &mut g, &b, &refs, seed)?;
    g.backward(total)?;
    let named = model.store.iter().any(|(n, _)| n.contains("bank"));
    let grads = model.store.gradients(&g, &b);
    let ok = !named && grads.len() == model.store.len() && model.bank == before;
    Ok(Check::new("bank_receives_no_gradient", ok, format!("{} parameter blocks, none is the bank", grads.len())))
}

fn brute_auc(s: &ScoredSet) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.scores.len() {
        for j in 0..s.scores.len() {
            if s.labels[i] && !s.labels[j] {
                den += 1.0;
                num += if s.scores[i] > s.scores[j] {
                    1.0
                } else if s.scores[i] == s.scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Dense sweep over every midpoint between distinct scores (plus the two
/// ends): the EER is where the false-accept and false-reject curves cross,
/// interpolated linearly between the neighbouring operating points.
pub fn sweep_eer(s: &ScoredSet) -> f64 {
    let mut u: Vec<f64> = s.scores.clone();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut th = vec![u[0] - 1.0];
    th.extend(u.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    th.push(u[u.len() - 1] + 1.0);
    let (p, n) = s.counts();
    let rates = |t: f64| {
        let mut fa = 0;
        let mut fr = 0;
        for (x, &l) in s.scores.iter().zip(&s.labels) {
            if l && *x < t {
                fr += 1;
            }
            if !l && *x >= t {
                fa += 1;
            }
        }
        (fa as f64 / n as f64, fr as f64 / p as f64)
    };
    let pts: Vec<(f64, f64)> = th.iter().map(|&t| rates(t)).collect();
    for w in pts.windows(2) {
        let (fa0, fr0) = w[0];
        let (fa1, fr1) = w[1];
        let (d0, d1) = (fa0 - fr0, fa1 - fr1);
        if d0 == 0.0 {
            return fa0;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let t = d0 / (d0 - d1);
            return fa0 + t * (fa1 - fa0);
        }
    }
    let (fa, fr) = pts[pts.len() - 1];
    0.5 * (fa + fr)
}

/// A random 50-item scored set with a mix of ties and at least one of each label.
pub fn random_scored_set(seed: u64, n: usize) -> ScoredSet {
    let mut r = rng::stream(seed, &[rng::tag("scored-set")]);
    loop {
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let base: f64 = r.random_range(0.0..1.0) + if l { 0.3 } else { 0.0 };
                if r.random_bool(0.2) {
                    (base * 10.0).round() / 10.0
                } else {
                    base
                }
            })
            .collect();
        let s = ScoredSet::new(scores, labels);
        let (p, q) = s.counts();
        if p > 0 && q > 0 {
            return s;
        }
    }
}

pub fn metric_oracles(sets: usize) -> Result<Vec<Check>> {
    let (mut auc_err, mut eer_err): (f64, f64) = (0.0, 0.0);
    for i in 0..sets {
        let s = random_scored_set(i as u64, 50);
        auc_err = auc_err.max((auc(&s)? - brute_auc(&s)).abs());
        eer_err = eer_err.max((eer(&s)?.0 - sweep_eer(&s)).abs());
    }
    Ok(vec![
        Check::new("auc_vs_pairwise", auc_err <= 1e-12, format!("{sets} sets, max diff {auc_err:e}")),
        Check::new("eer_vs_sweep", eer_err <= 1e-9, format!("{sets} sets, max diff {eer_err:e}")),
    ])
}

/// Every sequence over `alphabet` symbols of length ≤ `max_len`, shortest first.
pub fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * alphabet as usize);
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Compares `levenshtein` with an independent full-table DP on every pair of
/// sequences over `alphabet` symbols of length ≤ `max_len`. For a fixed left
/// sequence the table rows for all right sequences are filled by a
/// depth-first walk of the prefix tree, so shared prefixes are computed once.
/// Returns the number of pairs checked and the mismatches found.
pub fn exhaustive_levenshtein(alphabet: u8, max_len: usize) -> (u64, u64) {
    let mut checked = 0u64;
    let mut bad = 0u64;
    let w = max_len + 1;
    let mut table = vec![0u32; w * w];
    let mut right = Vec::with_capacity(max_len);
    for a in all_sequences(alphabet, max_len) {
        for (j, v) in table[..=a.len()].iter_mut().enumerate() {
            *v = j as u32;
        }
        walk(&a, alphabet, max_len, &mut right, &mut table, w, &mut checked, &mut bad);
    }
    (checked, bad)
}

#[allow(clippy::too_many_arguments)]
fn walk(a: &[u8], alphabet: u8, max_len: usize, b: &mut Vec<u8>, table: &mut [u32], w: usize, checked: &mut u64, bad: &mut u64) {
    let d = b.len();
    *checked += 1;
    if levenshtein(a, b) != table[d * w + a.len()] as usize {
        *bad += 1;
    }
    if d == max_len {
        return;
    }
    for c in 0..alphabet {
        let (prev, cur) = table.split_at_mut((d + 1) * w);
        let prev = &prev[d * w..];
        cur[0] = prev[0] + 1;
        for j in 1..=a.len() {
            let sub = prev[j - 1] + u32::from(a[j - 1] != c);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        b.push(c);
        walk(a, alphabet, max_len, b, table, w, checked, bad);
        b.pop();
    }
}

/// The quick suite run by `selftest`: a handful of seeds rather than the
/// full sweep of the test suites, and a shorter exhaustive edit-distance range.
pub fn quick_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for seed in 0..3 {
        for rep in check_ops(seed)? {
            out.push(Check::new(
                format!("grad_{}_seed{seed}", rep.op_name),
                rep.passed,
                format!("max rel error {:.2e}", rep.max_rel_error),
            ));
        }
        let rep = check_full_model(seed)?;
        out.push(Check::new(
            format!("grad_full_objective_seed{seed}"),
            rep.passed,
            format!("max rel error {:.2e}", rep.max_rel_error),
        ));
    }
    out.extend(closed_form_losses()?);
    out.push(bank_convergence(0)?);
    out.push(bank_has_no_gradient(0)?);
    out.extend(metric_oracles(100)?);
    let (n, bad) = exhaustive_levenshtein(4, 4);
    out.push(Check::new("levenshtein_exhaustive", bad == 0, format!("{n} pairs, {bad} mismatches")));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_at_one_seed() {
        for rep in check_ops(11).unwrap() {
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn full_objective_passes() {
        let rep = check_full_model(3).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn closed_forms_hold() {
        for c in closed_form_losses().unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn sweep_oracle_on_separable_sets() {
        let s = ScoredSet::new(vec![0.1, 0.2, 0.8, 0.9], vec![false, false, true, true]);
        assert_eq!(sweep_eer(&s), 0.0);
        let s = ScoredSet::new(vec![0.1, 0.2, 0.8, 0.9], vec![true, true, false, false]);
        assert_eq!(sweep_eer(&s), 1.0);
    }

    #[test]
    fn small_exhaustive_levenshtein() {
        let (n, bad) = exhaustive_levenshtein(3, 3);
        assert_eq!(n, 40 * 40);
        assert_eq!(bad, 0);
    }
}
