//! Run configuration: corpus, model and training settings in one TOML file.
//! Every field is range-checked before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveConfig;
use crate::corpus::{PairCounts, SynthConfig, VocabConfig};
use crate::encoders::{Activation, EncoderConfig};
use crate::error::{Error, Result};
use crate::verifier::VerifierConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub k: usize,
    pub d_in: usize,
    pub separation: f64,
    pub vocab_size: usize,
    pub family_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub noise_sigma: f64,
    pub speaker_sigma: f64,
    pub hard_threshold: usize,
    pub positives: usize,
    pub easy: usize,
    pub hard: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Split by keyword family so test keywords never occur in training.
    pub open_vocab: bool,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            k: 40,
            d_in: 16,
            separation: 2.0,
            vocab_size: 60,
            family_size: 3,
            len_min: 3,
            len_max: 8,
            dur_min: 2,
            dur_max: 4,
            noise_sigma: 0.3,
            speaker_sigma: 0.3,
            hard_threshold: 2,
            positives: 2000,
            easy: 1000,
            hard: 1000,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            open_vocab: true,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_proj: usize,
    pub d_attn: usize,
    pub max_query_frames: usize,
    pub activation: Activation,
    pub temperature: f64,
    pub focal_gamma: f64,
    pub focal_weight: f64,
    pub alpha: f64,
    pub quality_threshold: f64,
    pub inject_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            d_proj: 32,
            d_attn: 16,
            max_query_frames: 48,
            activation: Activation::Tanh,
            temperature: 0.07,
            focal_gamma: 2.0,
            focal_weight: 0.25,
            alpha: 0.8,
            quality_threshold: 0.2,
            inject_count: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub use_uat3: bool,
    pub use_clat: bool,
    pub use_claa: bool,
    /// Off disables bank updates, matrix injection and augmentation.
    pub use_memory_bank: bool,
    /// Augmented hard negatives per epoch, as a fraction of training positives.
    pub augment_ratio: f64,
    /// Extra pairs per above-median-error keyword, as a multiple of its pair count.
    pub rebalance_boost: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 7,
            grad_clip: 2.0,
            use_uat3: true,
            use_clat: true,
            use_claa: true,
            use_memory_bank: true,
            augment_ratio: 0.25,
            rebalance_boost: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<String>,
    pub checkpoint: Option<String>,
    pub log: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

fn check(ok: bool, field: &str, rule: &str, value: impl std::fmt::Debug) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{field} must be {rule}, got {value:?}")))
    }
}

fn in_range<T: PartialOrd + std::fmt::Debug + Copy>(field: &str, v: T, lo: T, hi: T) -> Result<()> {
    check(v >= lo && v <= hi, field, &format!("in [{lo:?}, {hi:?}]"), v)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Normalized TOML echo with every field spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        in_range("corpus.k", c.k, 2, 1000)?;
        in_range("corpus.d_in", c.d_in, 1, 1024)?;
        in_range("corpus.separation", c.separation, 0.0, 100.0)?;
        in_range("corpus.vocab_size", c.vocab_size, 2, 100_000)?;
        in_range("corpus.family_size", c.family_size, 1, 100)?;
        in_range("corpus.len_min", c.len_min, 1, 64)?;
        in_range("corpus.len_max", c.len_max, c.len_min, 64)?;
        in_range("corpus.dur_min", c.dur_min, 1, 64)?;
        in_range("corpus.dur_max", c.dur_max, c.dur_min, 64)?;
        in_range("corpus.noise_sigma", c.noise_sigma, 0.0, 100.0)?;
        in_range("corpus.speaker_sigma", c.speaker_sigma, 0.0, 100.0)?;
        in_range("corpus.hard_threshold", c.hard_threshold, 1, 64)?;
        in_range("corpus.positives", c.positives, 1, 10_000_000)?;
        in_range("corpus.easy", c.easy, 0, 10_000_000)?;
        in_range("corpus.hard", c.hard, 0, 10_000_000)?;
        for (f, v) in [
            ("corpus.train_ratio", c.train_ratio),
            ("corpus.val_ratio", c.val_ratio),
            ("corpus.test_ratio", c.test_ratio),
        ] {
            in_range(f, v, 0.0, 1.0)?;
        }
        check(c.train_ratio > 0.0, "corpus.train_ratio", "positive", c.train_ratio)?;
        let sum = c.train_ratio + c.val_ratio + c.test_ratio;
        check((sum - 1.0).abs() < 1e-9, "split ratios", "summing to 1", sum)?;

        let m = &self.model;
        in_range("model.d_model", m.d_model, 1, 4096)?;
        in_range("model.d_proj", m.d_proj, 1, m.d_model)?;
        in_range("model.d_attn", m.d_attn, 1, 4096)?;
        in_range("model.max_query_frames", m.max_query_frames, 1, 100_000)?;
        check(
            m.max_query_frames >= c.len_max * c.dur_max,
            "model.max_query_frames",
            &format!("at least len_max × dur_max = {}", c.len_max * c.dur_max),
            m.max_query_frames,
        )?;
        check(m.temperature > 0.0 && m.temperature <= 100.0, "model.temperature", "in (0, 100]", m.temperature)?;
        in_range("model.focal_gamma", m.focal_gamma, 0.0, 10.0)?;
        check(m.focal_weight > 0.0 && m.focal_weight <= 10.0, "model.focal_weight", "in (0, 10]", m.focal_weight)?;
        check(m.alpha > 0.0 && m.alpha < 1.0, "model.alpha", "in (0, 1)", m.alpha)?;
        in_range("model.quality_threshold", m.quality_threshold, 0.0, 0.5)?;
        in_range("model.inject_count", m.inject_count, 0, c.k)?;

        let t = &self.train;
        check(t.lr > 0.0 && t.lr <= 10.0, "train.lr", "in (0, 10]", t.lr)?;
        check(t.momentum >= 0.0 && t.momentum < 1.0, "train.momentum", "in [0, 1)", t.momentum)?;
        in_range("train.batch_size", t.batch_size, 1, 100_000)?;
        in_range("train.epochs", t.epochs, 1, 100_000)?;
        in_range("train.grad_clip", t.grad_clip, 0.0, 1e9)?;
        in_range("train.augment_ratio", t.augment_ratio, 0.0, 10.0)?;
        in_range("train.rebalance_boost", t.rebalance_boost, 0.0, 100.0)?;
        Ok(())
    }

    pub fn vocab(&self) -> VocabConfig {
        VocabConfig {
            size: self.corpus.vocab_size,
            family_size: self.corpus.family_size,
            len_min: self.corpus.len_min,
            len_max: self.corpus.len_max,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            dur_min: self.corpus.dur_min,
            dur_max: self.corpus.dur_max,
            noise_sigma: self.corpus.noise_sigma,
            speaker_sigma: self.corpus.speaker_sigma,
        }
    }

    pub fn counts(&self) -> PairCounts {
        PairCounts {
            positives: self.corpus.positives,
            easy: self.corpus.easy,
            hard: self.corpus.hard,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_in: self.corpus.d_in,
            text_vocab: self.corpus.k,
            d_model: self.model.d_model,
            d_proj: self.model.d_proj,
            activation: self.model.activation,
            seed: self.train.seed,
        }
    }

    pub fn verifier(&self) -> VerifierConfig {
        VerifierConfig {
            d_proj: self.model.d_proj,
            d_attn: self.model.d_attn,
            max_query_frames: self.model.max_query_frames,
            inject_count: self.model.inject_count,
            focal_gamma: self.model.focal_gamma,
            focal_weight: self.model.focal_weight,
            eps: 1e-8,
            seed: self.train.seed,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.model.temperature,
            eps: 1e-8,
        }
    }
}
