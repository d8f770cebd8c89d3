//! Experiment configuration: TOML format, schema validation, stable hashing.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use semcom_core::channel::{ChannelModel, Scenario};
use semcom_core::codec::CodecDims;
use semcom_core::training::OptimizerConfig;

/// Supported schema version.
pub const SCHEMA_VERSION: u32 = 1;

/// The key/type listing shipped with the binary; `validate` checks configs
/// against it before any compute.
pub const SCHEMA: &str = include_str!("../config-schema.toml");

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub experiment: ExperimentSection,
    pub corpus: CorpusSection,
    pub dims: DimsSection,
    pub training: TrainingSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// `two_plus_one` (3 users, 2 old) or `three_plus_two` (5 users, 3 old).
    pub scenario: String,
    /// `awgn` or `rayleigh`.
    pub channel: String,
    /// Case indices into the SNR tables (1..=7).
    pub cases: Vec<usize>,
    /// Method variants to run.
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    /// Similarity threshold `zeta` for the pass flag.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.9
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Per-user corpus files (line-aligned pairing).  Empty means synthesize.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    #[serde(default = "default_groups")]
    pub synthetic_groups: usize,
    #[serde(default)]
    pub synthetic_seed: u64,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Held-in sentences per user used for evaluation.
    #[serde(default = "default_eval")]
    pub eval_sentences: usize,
}

fn default_groups() -> usize {
    256
}
fn default_min_count() -> usize {
    1
}
fn default_eval() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DimsSection {
    pub d: usize,
    #[serde(default)]
    pub m: Option<usize>,
    pub c: usize,
    pub n: usize,
    /// Sentences per frame `L` (also the training batch size).
    pub frame_sentences: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff: usize,
    #[serde(default)]
    pub dropout: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub retrain_epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_penalty")]
    pub repetition_penalty: f64,
    /// Tradeoff weights for the full-retraining loss (all ones if empty).
    #[serde(default)]
    pub tau: Vec<f64>,
    /// Rate-1/3 repetition channel code for the classical baseline.
    #[serde(default = "default_repetition")]
    pub classical_repetition: bool,
    /// Clean receive SNR (dB) used for single-user pretraining.
    #[serde(default = "default_pretrain_snr")]
    pub pretrain_snr_db: f64,
}

fn default_repetition() -> bool {
    true
}

fn default_pretrain_snr() -> f64 {
    18.0
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    5e-4
}
fn default_penalty() -> f64 {
    1.2
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

/// Method variants of the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    FullRetrainSi,
    FullRetrainNoSi,
    PartialRetrainSi,
    PartialRetrainNoSi,
    Isolated,
    Classical,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full_retrain_si" => Method::FullRetrainSi,
            "full_retrain_no_si" => Method::FullRetrainNoSi,
            "partial_retrain_si" => Method::PartialRetrainSi,
            "partial_retrain_no_si" => Method::PartialRetrainNoSi,
            "isolated" => Method::Isolated,
            "classical" => Method::Classical,
            other => bail!("unknown method {other:?}"),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::FullRetrainSi => "full_retrain_si",
            Method::FullRetrainNoSi => "full_retrain_no_si",
            Method::PartialRetrainSi => "partial_retrain_si",
            Method::PartialRetrainNoSi => "partial_retrain_no_si",
            Method::Isolated => "isolated",
            Method::Classical => "classical",
        }
    }

    pub fn uses_side_info(&self) -> bool {
        matches!(self, Method::FullRetrainSi | Method::PartialRetrainSi)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        Ok(match self.experiment.scenario.as_str() {
            "two_plus_one" => Scenario::TwoPlusOne,
            "three_plus_two" => Scenario::ThreePlusTwo,
            other => bail!("unknown scenario {other:?}"),
        })
    }

    pub fn channel_model(&self) -> Result<ChannelModel> {
        Ok(match self.experiment.channel.as_str() {
            "awgn" => ChannelModel::Awgn,
            "rayleigh" => ChannelModel::Rayleigh,
            other => bail!("unknown channel model {other:?}"),
        })
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.experiment
            .methods
            .iter()
            .map(|m| Method::parse(m))
            .collect()
    }

    /// Old-user count of the scenario (the remainder are the added users).
    pub fn k_old(&self) -> Result<usize> {
        Ok(match self.scenario()? {
            Scenario::TwoPlusOne => 2,
            Scenario::ThreePlusTwo => 3,
        })
    }

    pub fn codec_dims(&self, vocab: usize) -> CodecDims {
        let d = self.dims.d;
        CodecDims {
            vocab,
            d,
            m: self.dims.m.unwrap_or(d),
            c: self.dims.c,
            n: self.dims.n,
            l: self.dims.frame_sentences,
            enc_layers: self.dims.enc_layers,
            dec_layers: self.dims.dec_layers,
            heads: self.dims.heads,
            d_ff: self.dims.ff,
            dropout: self.dims.dropout,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.training.learning_rate,
            beta1: self.training.beta1,
            beta2: self.training.beta2,
            epsilon: self.training.epsilon,
            weight_decay: self.training.weight_decay,
        }
    }

    /// Schema and semantic validation; fails before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            bail!(
                "config version {} unsupported (expected {SCHEMA_VERSION})",
                self.version
            );
        }
        self.scenario()?;
        self.channel_model()?;
        let methods = self.methods()?;
        if methods.is_empty() {
            bail!("at least one method required");
        }
        let unique: BTreeSet<_> = methods.iter().collect();
        if unique.len() != methods.len() {
            bail!("duplicate methods in config");
        }
        if self.experiment.cases.is_empty() {
            bail!("at least one case required");
        }
        for &c in &self.experiment.cases {
            if !(1..=7).contains(&c) {
                bail!("case index {c} outside 1..=7");
            }
        }
        if self.experiment.seeds.is_empty() {
            bail!("at least one seed required");
        }
        if !(0.0..=1.0).contains(&self.experiment.threshold) {
            bail!("threshold must be in [0, 1]");
        }
        let dims = self.codec_dims(100);
        dims.validate()
            .map_err(|e| anyhow::anyhow!("invalid dims: {e}"))?;
        if !self.optimizer().validate() {
            bail!("invalid optimizer settings");
        }
        if self.training.repetition_penalty < 1.0 {
            bail!("repetition_penalty must be >= 1");
        }
        if self.corpus.eval_sentences < self.dims.frame_sentences {
            bail!("eval_sentences must cover at least one frame");
        }
        if !self.corpus.paths.is_empty() {
            let users = self.scenario()?.users();
            if self.corpus.paths.len() != users && self.corpus.paths.len() != 1 {
                bail!(
                    "corpus.paths must list one pair file or {users} per-user files"
                );
            }
            for p in &self.corpus.paths {
                if !p.exists() {
                    bail!("corpus file {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }

    /// Stable hash over everything that affects results (output dir and
    /// threshold flags excluded), used to key checkpoints and stamp outputs.
    pub fn result_hash(&self) -> u64 {
        let mut key = ExperimentConfig {
            output: OutputSection {
                dir: PathBuf::new(),
            },
            ..self.clone()
        };
        key.experiment.methods.sort();
        key.experiment.seeds.sort_unstable();
        let canon = toml::to_string(&key).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in canon.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.result_hash())
    }
}
