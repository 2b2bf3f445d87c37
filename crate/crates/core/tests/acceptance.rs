//! One PASS/FAIL line per acceptance criterion. Criteria 5 to 7 and 9 share
//! one training run of the default configuration; criterion 6 adds two
//! ablated runs with the same seed and budget.

use std::time::{Duration, Instant};

use plcl::augmentation::make_hard_negative;
use plcl::checkpoint::Checkpoint;
use plcl::config::RunConfig;
use plcl::corpus::{levenshtein, synthesize_with_speaker, PairExample};
use plcl::eval::{diagonal_band_mean, evaluate};
use plcl::metrics::MetricsReport;
use plcl::model::Mode;
use plcl::numerics::{rng, Tensor};
use plcl::oracles::{
    bank_convergence, bank_has_no_gradient, check_full_model, check_ops, closed_form_losses, exhaustive_levenshtein,
    metric_oracles, MODEL_TOLERANCE, OP_TOLERANCE,
};
use plcl::splits::{generate_splits, Splits};
use plcl::train::{fresh_checkpoint, train, EpochRecord};
use plcl::Result;

struct Run {
    ck: Checkpoint,
    records: Vec<EpochRecord>,
    reports: [MetricsReport; 3],
    elapsed: Duration,
}

fn train_run(cfg: &RunConfig, splits: &Splits) -> Result<Run> {
    let t0 = Instant::now();
    let mut ck = fresh_checkpoint(cfg, &splits.train.inventory.checksum())?;
    let records = train(&mut ck, &splits.train, &splits.val, None, |_| {})?;
    let elapsed = t0.elapsed();
    let reports = [
        evaluate(&ck.model, &splits.test.pairs, Mode::Text)?,
        evaluate(&ck.model, &splits.test.pairs, Mode::Audio)?,
        evaluate(&ck.model, &splits.test.pairs, Mode::Both)?,
    ];
    Ok(Run { ck, records, reports, elapsed })
}

fn sub(r: &MetricsReport, subset: &str) -> f64 {
    r.auc_of(subset).unwrap_or(f64::NAN)
}

type Outcome = Result<(bool, String)>;

fn c1() -> Outcome {
    let t0 = Instant::now();
    let (mut op_max, mut model_max, mut n_ops) = (0f64, 0f64, 0);
    for seed in 0..20 {
        for rep in check_ops(seed)? {
            op_max = op_max.max(rep.max_rel_error);
            n_ops += 1;
        }
        model_max = model_max.max(check_full_model(seed)?.max_rel_error);
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        op_max < OP_TOLERANCE && model_max < MODEL_TOLERANCE && secs < 60.0,
        format!("{n_ops} op checks max rel {op_max:.2e} (< {OP_TOLERANCE:e}); full objective over 20 seeds max rel {model_max:.2e} (< {MODEL_TOLERANCE:e}); {secs:.1}s (< 60s)"),
    ))
}

fn c2() -> Outcome {
    let checks = closed_form_losses()?;
    let ok = checks.iter().all(|c| c.passed);
    let detail: Vec<String> = checks.iter().map(|c| format!("{} {}", c.name, c.detail)).collect();
    Ok((ok, detail.join("; ")))
}

fn c3() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let c = bank_convergence(seed)?;
        ok &= c.passed;
        detail.push(c.detail);
    }
    let g = bank_has_no_gradient(0)?;
    ok &= g.passed;
    Ok((ok, format!("alpha 0.8, 40 updates x 5 seeds: {}; {}", detail.join(", "), g.detail)))
}

fn c4() -> Outcome {
    let checks = metric_oracles(100)?;
    let (n, bad) = exhaustive_levenshtein(5, 6);
    let expected: u64 = (0..=6).map(|k| 5u64.pow(k)).sum::<u64>().pow(2);
    let ok = checks.iter().all(|c| c.passed) && bad == 0 && n == expected;
    let detail: Vec<String> = checks.iter().map(|c| format!("{} {}", c.name, c.detail)).collect();
    Ok((ok, format!("{}; levenshtein {n} pairs, {bad} mismatches", detail.join("; "))))
}

fn c5(base: &Run) -> Outcome {
    let [t, a, b] = &base.reports;
    let mut ok = sub(t, "easy") >= 0.97 && sub(t, "hard") >= 0.85;
    for s in ["easy", "hard"] {
        ok &= (sub(a, s) - sub(t, s)).abs() <= 0.05;
        ok &= sub(b, s) >= sub(t, s).max(sub(a, s)) - 0.02;
    }
    let mins = base.elapsed.as_secs_f64() / 60.0;
    ok &= mins < 15.0;
    Ok((
        ok,
        format!(
            "AUC easy/hard: text {:.4}/{:.4} (>= 0.97/0.85), audio {:.4}/{:.4} (within 0.05 of text), both {:.4}/{:.4} (>= max single - 0.02); training {mins:.1} min (< 15)",
            sub(t, "easy"), sub(t, "hard"), sub(a, "easy"), sub(a, "hard"), sub(b, "easy"), sub(b, "hard")
        ),
    ))
}

fn c6(base: &Run, cfg: &RunConfig, splits: &Splits) -> Outcome {
    let mut no_cl = cfg.clone();
    no_cl.train.use_clat = false;
    no_cl.train.use_claa = false;
    let mut no_bank = cfg.clone();
    no_bank.train.use_memory_bank = false;
    let full = sub(&base.reports[0], "hard");
    let h_cl = sub(&train_run(&no_cl, splits)?.reports[0], "hard");
    let h_bank = sub(&train_run(&no_bank, splits)?.reports[0], "hard");
    Ok((
        full - h_cl >= 0.02 && full - h_bank > 0.0,
        format!("text-mode hard AUC: full {full:.4}, w/o phoneme-level contrastive {h_cl:.4} (drop {:.4} >= 0.02), w/o memory bank + augmentation {h_bank:.4} (drop {:.4} > 0)", full - h_cl, full - h_bank),
    ))
}

fn c7(base: &Run, splits: &Splits) -> Outcome {
    let m = &base.ck.model;
    let mut bad = 0;
    for p in &splits.test.pairs {
        let both = m.infer_detail(&p.query, p.enroll_text.as_deref(), p.enroll_audio.as_ref())?;
        let t = m.score_pair(p, Mode::Text)?;
        let a = m.score_pair(p, Mode::Audio)?;
        if both.text_score.map(f64::to_bits) != Some(t.to_bits()) || both.audio_score.map(f64::to_bits) != Some(a.to_bits()) {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{} test pairs, {bad} differ bitwise", splits.test.pairs.len())))
}

fn c8() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.corpus.positives = 200;
    cfg.corpus.easy = 100;
    cfg.corpus.hard = 100;
    cfg.corpus.vocab_size = 30;
    cfg.train.epochs = 10;
    let splits = generate_splits(&cfg)?;
    let again = generate_splits(&cfg)?;
    let checksum = splits.train.inventory.checksum();
    let run = |stop: Option<usize>, from: Option<Checkpoint>| -> Result<(Checkpoint, Vec<String>)> {
        let mut ck = match from {
            Some(c) => c,
            None => fresh_checkpoint(&cfg, &checksum)?,
        };
        let mut log = Vec::new();
        train(&mut ck, &splits.train, &splits.val, stop, |r| log.push(r.log_line()))?;
        Ok((ck, log))
    };
    let csv = |ck: &Checkpoint| -> Result<String> { Ok(evaluate(&ck.model, &splits.test.pairs, Mode::Both)?.to_csv()) };
    let (a, log_a) = run(None, None)?;
    let (b, log_b) = run(None, None)?;
    let (half, mut log_r) = run(Some(5), None)?;
    let (resumed, rest) = run(None, Some(Checkpoint::from_bytes(&half.to_bytes())?))?;
    log_r.extend(rest);
    let same_data = splits == again;
    let same_runs = a.to_bytes() == b.to_bytes() && log_a == log_b && csv(&a)? == csv(&b)?;
    let same_resume = resumed.to_bytes() == a.to_bytes() && log_r == log_a && csv(&resumed)? == csv(&a)?;
    Ok((
        same_data && same_runs && same_resume,
        format!(
            "regenerated data identical: {same_data}; two 10-epoch runs byte-identical (checkpoint, log, CSV): {same_runs}; 5 + resume 5 equals 10: {same_resume}"
        ),
    ))
}

fn c9(base: &Run, cfg: &RunConfig, splits: &Splits) -> Outcome {
    let vocab = &splits.vocabulary.keywords;
    let bank = &base.ck.model.bank;
    let synth = cfg.synth();
    let (mut made, mut failed, mut bad) = (0, 0, 0);
    let positives: Vec<&PairExample> = splits.train.pairs.iter().filter(|p| p.is_positive()).collect();
    for (i, p) in positives.iter().enumerate() {
        for n_edits in [1, 2] {
            let seed = rng::derive(11, &[i as u64, n_edits as u64]);
            match make_hard_negative(p, n_edits, bank, &splits.train.inventory, &synth, vocab, seed) {
                Ok(neg) => {
                    made += 1;
                    let kw = neg.enroll_text.as_deref().unwrap_or(&[]);
                    let d = levenshtein(p.enrolled_keyword(), kw);
                    if !(1..=n_edits).contains(&d) || vocab.iter().any(|v| v == kw) {
                        bad += 1;
                    }
                }
                Err(_) => failed += 1,
            }
        }
    }
    Ok((
        made > 0 && bad == 0,
        format!("{made} hard negatives from {} train positives (n_edits 1 and 2), {bad} outside [1, n_edits] or colliding with the {}-keyword vocabulary; {failed} requests declined after replanning", positives.len(), vocab.len()),
    ))
}

fn supplementary(base: &Run, splits: &Splits) -> Vec<(String, Outcome)> {
    let mut out = Vec::new();
    let r = &base.records;
    out.push((
        "training loss falls from epoch 1 to epoch 10".to_string(),
        Ok((r[9].loss.total < r[0].loss.total, format!("{:.4} -> {:.4} per pair", r[0].loss.total, r[9].loss.total))),
    ));
    let m = &base.ck.model;
    let th = base.ck.thresholds.get(Mode::Text).unwrap_or(0.5);
    let accept = (|| -> Result<(bool, String)> {
        let inv = &splits.test.inventory;
        let (mut above, mut total) = (0, 0);
        for (i, kw) in splits.split_keywords[2].iter().enumerate() {
            let e = m.enroll(Some(kw), None)?;
            for rep in 0..3u64 {
                let q = synthesize_with_speaker(inv, kw, &base.ck.model.cfg.synth(), rng::derive(5, &[i as u64, rep]))?;
                above += usize::from(m.infer_enrolled(&q, &e)?.score >= th);
                total += 1;
            }
        }
        Ok((2 * above > total, format!("{above}/{total} fresh utterances of held-out keywords accepted at the text threshold {th:.4} (majority required)")))
    })();
    out.push(("text-only enrollment accepts a fresh positive utterance".to_string(), accept));
    let band = (|| -> Result<(bool, String)> {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for p in &splits.test.pairs {
            let inf = m.infer_detail(&p.query, p.enroll_text.as_deref(), None)?;
            let mat = inf.m_at.expect("text path");
            let rows = mat.rows() - inf.injected;
            let own = Tensor::new(rows, mat.cols(), mat.data()[..rows * mat.cols()].to_vec())?;
            let v = diagonal_band_mean(&own, 0.15);
            if p.is_positive() { pos.push(v) } else if p.difficulty == Some(plcl::corpus::Difficulty::Easy) { neg.push(v) }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok((mean(&pos) > mean(&neg), format!("mean diagonal-band similarity: positive {:.4}, easy negative {:.4}", mean(&pos), mean(&neg))))
    })();
    out.push(("positive similarity matrices concentrate on the diagonal".to_string(), band));
    out
}

fn report(label: &str, title: &str, o: Outcome) -> bool {
    let (ok, detail) = match o {
        Ok(x) => x,
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} {label} {title}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    let mut all = true;
    all &= report("[1]", "gradient correctness", c1());
    all &= report("[2]", "closed-form loss values", c2());
    all &= report("[3]", "memory bank momentum", c3());
    all &= report("[4]", "metric and edit-distance oracles", c4());

    let cfg = RunConfig::default();
    let baseline = generate_splits(&cfg).and_then(|s| Ok((train_run(&cfg, &s)?, s)));
    match &baseline {
        Ok((base, splits)) => {
            all &= report("[5]", "trend reproduction", c5(base));
            all &= report("[6]", "ablation directionality", c6(base, &cfg, splits));
            all &= report("[7]", "masking equivalence", c7(base, splits));
        }
        Err(e) => {
            for (l, t) in [("[5]", "trend reproduction"), ("[6]", "ablation directionality"), ("[7]", "masking equivalence")] {
                all &= report(l, t, Err(plcl::Error::Contract(format!("baseline run failed: {e}"))));
            }
        }
    }
    all &= report("[8]", "determinism and resume", c8());
    match &baseline {
        Ok((base, splits)) => {
            all &= report("[9]", "augmentation soundness", c9(base, &cfg, splits));
            for (title, o) in supplementary(base, splits) {
                all &= report("[+]", &title, o);
            }
        }
        Err(e) => {
            all &= report("[9]", "augmentation soundness", Err(plcl::Error::Contract(format!("baseline run failed: {e}"))));
        }
    }
    if !all {
        std::process::exit(1);
    }
}
