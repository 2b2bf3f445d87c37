use plcl::augmentation::{edit_sequence, ALL_OPS};
use plcl::contrastive::{collect_phoneme_batch, info_nce, ContrastiveConfig, PhonemePair};
use plcl::corpus::{levenshtein, Difficulty};
use plcl::memory_bank::MemoryBank;
use plcl::metrics::{auc, eer, report, MetricsReport, ScoredSet};
use plcl::numerics::{Graph, Tensor};
use plcl::oracles::{metric_oracles, random_scored_set, sweep_eer};
use proptest::prelude::*;

fn nce(anchors: &[Vec<f64>], keys: &[Vec<f64>], t: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(anchors).unwrap());
    let k = g.constant(Tensor::from_rows(keys).unwrap());
    let ids: Vec<usize> = (0..anchors.len()).collect();
    let pb = collect_phoneme_batch(&mut g, &[PhonemePair { anchors: a, keys: k, phoneme_ids: &ids }]).unwrap();
    let l = info_nce(&mut g, &pb, &ContrastiveConfig { temperature: t, eps: 1e-8 }).unwrap();
    g.value(l).item()
}

fn rows(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(prop_oneof![-3f64..-0.1, 0.1f64..3.0], 3), n)
}

proptest! {
    #[test]
    fn info_nce_permutation_invariant(
        (a, k, perm) in (2usize..6).prop_flat_map(|n| (rows(n), rows(n), Just((0..n).collect::<Vec<_>>()).prop_shuffle())),
        t in 0.05f64..2.0,
    ) {
        let pa: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
        let pk: Vec<Vec<f64>> = perm.iter().map(|&i| k[i].clone()).collect();
        let (x, y) = (nce(&a, &k, t), nce(&pa, &pk, t));
        prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        prop_assert!(x >= 0.0);
    }

    #[test]
    fn info_nce_scale_invariant(
        (a, k) in (1usize..6).prop_flat_map(|n| (rows(n), rows(n))),
        s in 0.01f64..100.0,
    ) {
        let sa: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        let x = nce(&a, &k, 0.07);
        prop_assert!((x - nce(&sa, &k, 0.07)).abs() <= 1e-8 * x.abs().max(1.0));
    }

    #[test]
    fn levenshtein_is_a_metric(
        a in prop::collection::vec(0u8..4, 0..9),
        b in prop::collection::vec(0u8..4, 0..9),
        c in prop::collection::vec(0u8..4, 0..9),
    ) {
        let ab = levenshtein(&a, &b);
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
        prop_assert!(ab >= a.len().abs_diff(b.len()) && ab <= a.len().max(b.len()));
    }

    #[test]
    fn auc_invariant_under_monotone_transforms(seed in any::<u64>()) {
        let s = random_scored_set(seed, 50);
        let base = auc(&s).unwrap();
        let transforms: [fn(f64) -> f64; 3] = [|x| 3.0 * x - 7.0, |x| x.exp(), |x| x * x * x + x];
        for f in transforms {
            let t = ScoredSet::new(s.scores.iter().map(|v| f(*v)).collect(), s.labels.clone());
            prop_assert!((auc(&t).unwrap() - base).abs() <= 1e-12);
            prop_assert!((eer(&t).unwrap().0 - eer(&s).unwrap().0).abs() <= 1e-12);
        }
    }

    #[test]
    fn auc_of_flipped_labels_is_complement(mut scores in prop::collection::vec(0f64..1.0, 4..40), split in 1usize..3) {
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        prop_assume!(scores.len() >= 4);
        let labels: Vec<bool> = (0..scores.len()).map(|i| (i * 7 + split) % 3 == 0).collect();
        prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = auc(&ScoredSet::new(scores.clone(), labels)).unwrap();
        let b = auc(&ScoredSet::new(scores, flipped)).unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn eer_matches_sweep(seed in any::<u64>(), n in 2usize..60) {
        let s = random_scored_set(seed, n);
        prop_assert!((eer(&s).unwrap().0 - sweep_eer(&s)).abs() <= 1e-9);
    }

    #[test]
    fn edits_stay_within_bounds(
        seq in prop::collection::vec(0usize..10, 1..8),
        n_edits in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut bank = MemoryBank::new(10, 2, 0.8, true).unwrap();
        for k in 0..10 {
            bank.set_row(k, &[1.0, k as f64]).unwrap();
        }
        let forbidden = vec![seq.clone()];
        if let Ok((out, plans)) = edit_sequence(&seq, n_edits, &bank, &ALL_OPS, &forbidden, seed) {
            let d = levenshtein(&seq, &out);
            prop_assert!(d >= 1 && d <= n_edits);
            prop_assert!(plans.len() <= n_edits);
            prop_assert!(!out.is_empty());
        }
    }
}

#[test]
fn metric_oracles_on_hundred_sets() {
    for c in metric_oracles(100).unwrap() {
        assert!(c.passed, "{c:?}");
    }
}

#[test]
fn report_csv_round_trip_and_subsets() {
    let mut s = random_scored_set(9, 50);
    for (i, d) in s.difficulty.iter_mut().enumerate() {
        *d = Some(if i % 2 == 0 { Difficulty::Easy } else { Difficulty::Hard });
    }
    let r = report(&s).unwrap();
    assert_eq!(MetricsReport::from_csv(&r.to_csv()).unwrap(), r);
    let hard = s.subset(Difficulty::Hard);
    assert_eq!(r.auc_of("hard"), Some(auc(&hard).unwrap()));
}
