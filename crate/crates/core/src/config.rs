//! Run configuration: one flat TOML table covering data, model dimensions
//! and every training setting.
//!
//! Layers, lowest precedence first: built-in defaults, a named preset, the
//! config file, `--set key=value` overrides, dedicated command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryConfig, EmbeddingSource, DEFAULT_BN_MOMENTUM, DEFAULT_FEATURES, DEFAULT_MLP_HIDDEN};
use crate::data::{
    build_vocab, gen_synthetic, read_bitext, SentencePair, SyntheticTask, Vocabulary,
};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::trainer::TrainingConfig;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ADVNMT_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic task; mutually exclusive with corpus paths.
    pub task: Option<SyntheticTask>,
    /// Number of synthetic symbols.
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub data_seed: u64,

    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    /// Regular-token cap per side for corpus vocabularies (0: no cap).
    pub vocab_limit: usize,
    /// Corpus pairs with a longer side are dropped.
    pub max_sentence_len: usize,

    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub image_len: usize,
    pub features: usize,
    pub mlp_hidden: usize,
    pub bn_momentum: f64,
    pub embeddings: EmbeddingSource,

    pub seed: u64,
    pub mle_lr: f64,
    pub mle_epochs: usize,
    pub mle_target_bleu: Option<f64>,
    pub lr_g: f64,
    pub lr_d: f64,
    pub momentum_d: f64,
    pub clip_g: f64,
    pub batch_size: usize,
    pub d_batch_size: usize,
    pub adv_fraction: f64,
    pub baseline_decay: f64,
    pub halve_every_epochs: usize,
    pub neg_beam: usize,
    pub eval_beam: usize,
    pub d_refresh_every: usize,
    pub d_epochs: usize,
    pub adv_epochs: usize,
    /// Length cap for sampling and decoding.
    pub decode_max_len: usize,
    /// Joint-training checkpoint cadence in epochs.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainingConfig::default();
        RunConfig {
            task: None,
            alphabet: 12,
            min_len: 3,
            max_len: 10,
            train_size: 2000,
            dev_size: 200,
            data_seed: 1,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            vocab_limit: 0,
            max_sentence_len: crate::data::DEFAULT_MAX_LEN,
            emb_dim: 16,
            hidden_dim: 32,
            image_len: 12,
            features: DEFAULT_FEATURES,
            mlp_hidden: DEFAULT_MLP_HIDDEN,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            embeddings: EmbeddingSource::Shared,
            seed: 1,
            mle_lr: 1.0,
            mle_epochs: 10,
            mle_target_bleu: None,
            lr_g: 0.1,
            lr_d: 0.1,
            momentum_d: t.momentum_d,
            clip_g: t.clip_g,
            batch_size: 8,
            d_batch_size: 16,
            adv_fraction: t.adv_fraction,
            baseline_decay: t.baseline_decay,
            halve_every_epochs: 0,
            neg_beam: t.neg_beam,
            eval_beam: t.eval_beam,
            d_refresh_every: t.d_refresh_every,
            d_epochs: 3,
            adv_epochs: 3,
            decode_max_len: t.max_len,
            checkpoint_every: 1,
            out_dir: None,
        }
    }
}

/// Size tier of a synthetic preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetSize {
    Tiny,
    Small,
    Medium,
}

impl fmt::Display for PresetSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PresetSize::Tiny => "tiny",
            PresetSize::Small => "small",
            PresetSize::Medium => "medium",
        })
    }
}

const TASKS: [SyntheticTask; 3] = [SyntheticTask::Copy, SyntheticTask::Reverse, SyntheticTask::Shift];
const SIZES: [PresetSize; 3] = [PresetSize::Tiny, PresetSize::Small, PresetSize::Medium];

/// Names of all built-in presets, `<task>-<size>`.
pub fn preset_names() -> Vec<String> {
    TASKS
        .iter()
        .flat_map(|t| SIZES.iter().map(move |s| format!("{t}-{s}")))
        .collect()
}

impl RunConfig {
    /// Built-in synthetic preset.
    pub fn preset(name: &str) -> Result<Self> {
        let (task, size) = name
            .split_once('-')
            .ok_or_else(|| unknown_preset(name))?;
        let task: SyntheticTask = task.parse().map_err(|_| unknown_preset(name))?;
        let base = RunConfig {
            task: Some(task),
            ..Default::default()
        };
        Ok(match size {
            "tiny" => RunConfig {
                alphabet: 6,
                min_len: 2,
                max_len: 5,
                train_size: 500,
                dev_size: 100,
                emb_dim: 8,
                hidden_dim: 16,
                image_len: 8,
                features: 8,
                mlp_hidden: 8,
                mle_epochs: 5,
                d_epochs: 2,
                adv_epochs: 2,
                ..base
            },
            "small" => RunConfig {
                mle_target_bleu: Some(40.0),
                ..base
            },
            "medium" => RunConfig {
                alphabet: 24,
                min_len: 5,
                max_len: 15,
                train_size: 10000,
                dev_size: 500,
                emb_dim: 32,
                hidden_dim: 64,
                image_len: 16,
                batch_size: 16,
                d_batch_size: 32,
                mle_epochs: 15,
                ..base
            },
            _ => return Err(unknown_preset(name)),
        })
    }

    /// Layers a preset, a config file and `key=value` overrides.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match preset {
            Some(p) => Self::preset(p)?,
            None => Self::default(),
        };
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            table.extend(layer);
        }
        for kv in overrides {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            table.insert(key.trim().to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::resolve(None, Some(path), &[])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let corpus = self.train_src.is_some() || self.train_tgt.is_some();
        match (self.task, corpus) {
            (Some(_), true) => {
                return Err(Error::Config("set either `task` or corpus paths, not both".into()));
            }
            (None, false) => {
                return Err(Error::Config(
                    "no training data: set `task` (or use a preset) or `train_src` and `train_tgt`".into(),
                ));
            }
            (None, true) if self.train_src.is_none() || self.train_tgt.is_none() => {
                return Err(Error::Config("`train_src` and `train_tgt` must be set together".into()));
            }
            _ => {}
        }
        if self.dev_src.is_some() != self.dev_tgt.is_some() {
            return Err(Error::Config("`dev_src` and `dev_tgt` must be set together".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        self.generator_config_for(4, 4).validate()?;
        self.training().validate()?;
        Ok(())
    }

    /// Settings for the joint stage (and the adversary stage).
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            lr_g: self.lr_g,
            lr_d: self.lr_d,
            momentum_d: self.momentum_d,
            clip_g: self.clip_g,
            batch_size: self.batch_size,
            d_batch_size: self.d_batch_size,
            adv_fraction: self.adv_fraction,
            baseline_decay: self.baseline_decay,
            halve_every_epochs: self.halve_every_epochs,
            neg_beam: self.neg_beam,
            eval_beam: self.eval_beam,
            d_refresh_every: self.d_refresh_every,
            epochs: self.adv_epochs,
            d_epochs: self.d_epochs,
            max_len: self.decode_max_len,
            seed: self.seed,
            target_dev_bleu: None,
        }
    }

    /// Settings for MLE pretraining.
    pub fn mle_training(&self) -> TrainingConfig {
        TrainingConfig {
            lr_g: self.mle_lr,
            epochs: self.mle_epochs,
            target_dev_bleu: self.mle_target_bleu,
            ..self.training()
        }
    }

    pub fn generator_config_for(&self, src_vocab: usize, tgt_vocab: usize) -> GeneratorConfig {
        GeneratorConfig::new(src_vocab, tgt_vocab, self.emb_dim, self.hidden_dim)
    }

    pub fn adversary_config(&self, g: &GeneratorConfig) -> AdversaryConfig {
        AdversaryConfig {
            src_vocab: g.src_vocab,
            tgt_vocab: g.tgt_vocab,
            emb_dim: g.emb_dim,
            image_len: self.image_len,
            features: self.features,
            mlp_hidden: self.mlp_hidden,
            bn_momentum: self.bn_momentum,
            embeddings: self.embeddings,
        }
    }

    /// Output directory: `flag`, then the config, then `$ADVNMT_OUT_DIR`,
    /// then `runs/<command>`.
    pub fn output_dir(&self, flag: Option<&Path>, command: &str) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs").join(command))
    }

    /// Loads or generates the training and dev sets with their vocabularies.
    pub fn load_data(&self) -> Result<Dataset> {
        if let Some(task) = self.task {
            let range = (self.min_len, self.max_len);
            let train = gen_synthetic(task, self.train_size, self.alphabet, range, self.data_seed)?;
            let dev = gen_synthetic(task, self.dev_size, self.alphabet, range, self.data_seed.wrapping_add(1))?;
            let vocab = Vocabulary::synthetic(self.alphabet);
            return Ok(Dataset {
                train,
                dev,
                src_vocab: vocab.clone(),
                tgt_vocab: vocab,
            });
        }
        let (src, tgt) = (self.train_src.as_ref().unwrap(), self.train_tgt.as_ref().unwrap());
        let keep = |(s, t): &(Vec<String>, Vec<String>)| {
            !s.is_empty() && !t.is_empty() && s.len() <= self.max_sentence_len && t.len() <= self.max_sentence_len
        };
        let raw: Vec<_> = read_bitext(src, tgt)?.into_iter().filter(keep).collect();
        if raw.is_empty() {
            return Err(Error::Empty("training corpus after length filtering"));
        }
        let limit = if self.vocab_limit == 0 { usize::MAX } else { self.vocab_limit };
        let src_vocab = build_vocab(raw.iter().flat_map(|p| &p.0), limit)?;
        let tgt_vocab = build_vocab(raw.iter().flat_map(|p| &p.1), limit)?;
        let encode = |pairs: Vec<(Vec<String>, Vec<String>)>| -> Vec<SentencePair> {
            pairs
                .into_iter()
                .map(|(s, t)| SentencePair::new(src_vocab.encode(&s), tgt_vocab.encode(&t)))
                .collect()
        };
        let dev = match (&self.dev_src, &self.dev_tgt) {
            (Some(s), Some(t)) => encode(read_bitext(s, t)?.into_iter().filter(keep).collect()),
            _ => Vec::new(),
        };
        Ok(Dataset {
            train: encode(raw),
            dev,
            src_vocab,
            tgt_vocab,
        })
    }
}

fn unknown_preset(name: &str) -> Error {
    Error::Config(format!("unknown preset `{name}` (available: {})", preset_names().join(", ")))
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}
