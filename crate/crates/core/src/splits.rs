//! Train / validation / test corpus generation.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::corpus::{build_pairs, generate_vocabulary, Keyword, PairCounts, PhonemeInventory, Vocabulary};
use crate::dataset::{save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::numerics::rng;

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub vocabulary: Vocabulary,
    /// Keywords available to each split, in `SPLIT_NAMES` order.
    pub split_keywords: [Vec<Keyword>; 3],
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn datasets(&self) -> [(&'static str, &Dataset); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Splits `n` items by ratio; the remainder after rounding goes to the last split.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let a = ((n as f64) * ratios[0]).round() as usize;
    let b = (((n as f64) * ratios[1]).round() as usize).min(n - a.min(n));
    let a = a.min(n);
    [a, b, n - a - b]
}

fn counts_for(total: PairCounts, ratios: [f64; 3]) -> [PairCounts; 3] {
    let p = split_sizes(total.positives, ratios);
    let e = split_sizes(total.easy, ratios);
    let h = split_sizes(total.hard, ratios);
    [0, 1, 2].map(|i| PairCounts {
        positives: p[i],
        easy: e[i],
        hard: h[i],
    })
}

/// Family-level split for open-vocabulary evaluation; every split that
/// receives pairs gets at least one family.
fn family_split(n_families: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let needed = ratios.iter().filter(|r| **r > 0.0).count();
    if n_families < needed {
        return Err(Error::Generation(format!(
            "{n_families} keyword families cannot cover {needed} non-empty splits"
        )));
    }
    let mut sizes = split_sizes(n_families, ratios);
    for i in 0..3 {
        if ratios[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| sizes[j]).expect("three splits");
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    let mut fams: Vec<usize> = (0..n_families).collect();
    fams.shuffle(&mut rng::stream(seed, &[rng::tag("family-split")]));
    let test = fams.split_off(sizes[0] + sizes[1]);
    let val = fams.split_off(sizes[0]);
    Ok([fams, val, test])
}

/// The phoneme inventory a corpus config generates.
pub fn inventory(cfg: &RunConfig) -> Result<PhonemeInventory> {
    let c = &cfg.corpus;
    PhonemeInventory::generate(c.k, c.d_in, c.separation, rng::derive(c.seed, &[rng::tag("inventory")]))
}

pub fn generate_splits(cfg: &RunConfig) -> Result<Splits> {
    cfg.validate()?;
    let c = &cfg.corpus;
    let seed = c.seed;
    let inventory = inventory(cfg)?;
    let vocabulary = generate_vocabulary(c.k, &cfg.vocab(), rng::derive(seed, &[rng::tag("vocabulary")]))?;
    let ratios = [c.train_ratio, c.val_ratio, c.test_ratio];
    let split_keywords: [Vec<Keyword>; 3] = if c.open_vocab {
        let fams = family_split(vocabulary.num_families(), ratios, seed)?;
        fams.map(|f| vocabulary.subset_by_family(&f).keywords)
    } else {
        [0, 1, 2].map(|_| vocabulary.keywords.clone())
    };
    let counts = counts_for(cfg.counts(), ratios);
    let synth = cfg.synth();
    let mut sets = Vec::with_capacity(3);
    for i in 0..3 {
        let pairs = if counts[i].total() == 0 {
            Vec::new()
        } else {
            build_pairs(
                &split_keywords[i],
                &inventory,
                &synth,
                counts[i],
                c.hard_threshold,
                rng::derive(seed, &[rng::tag("split"), i as u64]),
            )
            .map_err(|e| Error::Generation(format!("{} split: {e}", SPLIT_NAMES[i])))?
        };
        sets.push(Dataset {
            inventory: inventory.clone(),
            pairs,
        });
    }
    let test = sets.pop().expect("test");
    let val = sets.pop().expect("val");
    let train = sets.pop().expect("train");
    Ok(Splits {
        vocabulary,
        split_keywords,
        train,
        val,
        test,
    })
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and the config echo.
pub fn save_splits(dir: &Path, splits: &Splits, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, ds) in splits.datasets() {
        save_dataset(&dir.join(format!("{name}.jsonl")), ds)?;
    }
    let echo = dir.join("config.toml");
    std::fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))
}
