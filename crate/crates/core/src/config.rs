//! Config files: flat TOML sections with exact key names.
//!
//! ```toml
//! [model]
//! preset = "llama2-7b"      # optional, expanded before the keys below apply
//! stored_layers = 2
//!
//! [mezo]
//! epsilon = 1e-3
//! ```
//!
//! Plan files for `train` may add `[bp_model]` and `[mezo_model]` (each layered over
//! `[model]`), `[experiment]` and `[pretrain]`. Unknown sections and keys are errors.

use crate::bench::{ExperimentPlan, Pretraining};
use crate::memory::{ConfigError, ModelConfig};
use crate::toy::{TaskKind, ToyTask};
use crate::zo::ZoConfig;
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

pub const PRESETS: [&str; 2] = ["llama2-7b", "gpt2-medium"];

pub fn preset(name: &str) -> Option<ModelConfig> {
    match name {
        "llama2-7b" => Some(ModelConfig::llama2_7b()),
        "gpt2-medium" => Some(ModelConfig::gpt2_medium()),
        _ => None,
    }
}

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("[{section}] unknown preset {name:?} (known: llama2-7b, gpt2-medium)")]
    UnknownPreset { section: &'static str, name: String },
    #[error("[{section}] missing key `{key}`")]
    Missing { section: &'static str, key: &'static str },
    #[error("missing section [{0}]")]
    MissingSection(&'static str),
    #[error("[{section}] {source}")]
    Invalid {
        section: &'static str,
        #[source]
        source: ConfigError,
    },
    #[error("[{section}] `{key}`: {message}")]
    Value { section: &'static str, key: &'static str, message: String },
}

impl ConfigFileError {
    /// The offending key, when the error concerns one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigFileError::Missing { key, .. } | ConfigFileError::Value { key, .. } => Some(key),
            ConfigFileError::UnknownPreset { .. } => Some("preset"),
            ConfigFileError::Invalid { source, .. } => Some(source.key()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub context_length: Option<usize>,
    pub num_layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub kv_heads: Option<usize>,
    pub num_mlps: Option<usize>,
    pub expansion_factor: Option<f64>,
    pub vocab_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub bytes_per_param: Option<f64>,
    pub stored_layers: Option<f64>,
}

macro_rules! model_keys {
    ($m:ident) => {
        $m!(context_length, num_layers, hidden_dim, num_heads, kv_heads, num_mlps, expansion_factor, vocab_size, batch_size, bytes_per_param, stored_layers)
    };
}

impl ModelSection {
    /// `other`'s keys win; so does its preset.
    pub fn layered(&self, other: &ModelSection) -> ModelSection {
        macro_rules! pick {
            ($($k:ident),*) => {
                ModelSection { preset: other.preset.clone().or_else(|| self.preset.clone()), $($k: other.$k.or(self.$k)),* }
            };
        }
        model_keys!(pick)
    }

    /// Expands the preset (if any), applies the keys, and validates.
    pub fn resolve(&self, section: &'static str) -> Result<ModelConfig, ConfigFileError> {
        let base = match &self.preset {
            Some(name) => Some(preset(name).ok_or_else(|| ConfigFileError::UnknownPreset { section, name: name.clone() })?),
            None => None,
        };
        macro_rules! build {
            ($($k:ident),*) => {
                ModelConfig {
                    $($k: match (self.$k, &base) {
                        (Some(v), _) => v,
                        (None, Some(b)) => b.$k,
                        (None, None) => return Err(ConfigFileError::Missing { section, key: stringify!($k) }),
                    }),*
                }
            };
        }
        let cfg = model_keys!(build);
        cfg.validate().map_err(|source| ConfigFileError::Invalid { section, source })?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MezoSection {
    pub epsilon: Option<f64>,
    pub learning_rate: Option<f64>,
    pub num_perturbations: Option<usize>,
    pub master_seed: Option<u64>,
}

/// A byte count: a plain number, or a string with an optional `GB` (10⁹) or `GiB`
/// (2³⁰) suffix.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Bytes {
    Number(f64),
    Text(String),
}

impl Bytes {
    pub fn value(&self) -> Result<f64, String> {
        match self {
            Bytes::Number(x) => Ok(*x),
            Bytes::Text(s) => parse_bytes(s),
        }
    }
}

/// Parses `"80GB"`, `"16GiB"`, `"1e6"` or `"1234"` into bytes.
pub fn parse_bytes(s: &str) -> Result<f64, String> {
    let t = s.trim();
    let (num, mult) = if let Some(n) = t.strip_suffix("GiB") {
        (n, (1u64 << 30) as f64)
    } else if let Some(n) = t.strip_suffix("GB") {
        (n, 1e9)
    } else {
        (t, 1.0)
    };
    let x: f64 = num.trim().parse().map_err(|_| format!("cannot parse {s:?} as bytes (use a number, or a GB/GiB suffix)"))?;
    let bytes = x * mult;
    if bytes.is_finite() && bytes > 0.0 {
        Ok(bytes)
    } else {
        Err(format!("{s:?} is not a positive byte count"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub budget: Option<Bytes>,
    pub task: Option<String>,
    /// Defaults to the MeZO model's context length.
    pub seq_len: Option<usize>,
    pub task_seed: Option<u64>,
    pub answer_tokens: Option<[usize; 2]>,
    pub steps: Option<usize>,
    pub eval_every: Option<usize>,
    pub eval_examples: Option<usize>,
    pub lr_grid_bp: Option<Vec<f64>>,
    pub lr_grid_mezo: Option<Vec<f64>>,
    pub run_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub answer_tokens: Option<[usize; 2]>,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    /// Defaults to the experiment's task seed.
    pub task_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<ModelSection>,
    pub bp_model: Option<ModelSection>,
    pub mezo_model: Option<ModelSection>,
    pub mezo: Option<MezoSection>,
    pub experiment: Option<ExperimentSection>,
    pub pretrain: Option<PretrainSection>,
}

fn need<T>(v: Option<T>, section: &'static str, key: &'static str) -> Result<T, ConfigFileError> {
    v.ok_or(ConfigFileError::Missing { section, key })
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigFileError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigFileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigFileError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// The `[model]` section as a validated config.
    pub fn model_config(&self) -> Result<ModelConfig, ConfigFileError> {
        self.model.as_ref().ok_or(ConfigFileError::MissingSection("model"))?.resolve("model")
    }

    /// `[mezo]` over the defaults.
    pub fn zo_config(&self) -> Result<ZoConfig, ConfigFileError> {
        let d = ZoConfig::default();
        let s = self.mezo.clone().unwrap_or_default();
        let cfg = ZoConfig {
            epsilon: s.epsilon.unwrap_or(d.epsilon),
            learning_rate: s.learning_rate.unwrap_or(d.learning_rate),
            num_perturbations: s.num_perturbations.unwrap_or(d.num_perturbations),
            master_seed: s.master_seed.unwrap_or(d.master_seed),
        };
        cfg.validate().map_err(|e| {
            let key = match e {
                crate::zo::ZoError::BadEpsilon(_) => "epsilon",
                crate::zo::ZoError::BadLearningRate(_) => "learning_rate",
                _ => "num_perturbations",
            };
            ConfigFileError::Value { section: "mezo", key, message: e.to_string() }
        })?;
        Ok(cfg)
    }

    /// Assembles a training plan. Matched-budget conditions are checked later, by
    /// [`ExperimentPlan::validate`].
    pub fn experiment_plan(&self) -> Result<ExperimentPlan, ConfigFileError> {
        let base = self.model.clone().unwrap_or_default();
        let bp_model = base.layered(&self.bp_model.clone().unwrap_or_default()).resolve("bp_model")?;
        let mezo_model = base.layered(&self.mezo_model.clone().unwrap_or_default()).resolve("mezo_model")?;
        let e = self.experiment.clone().ok_or(ConfigFileError::MissingSection("experiment"))?;
        const S: &str = "experiment";
        let budget_bytes = need(e.budget, S, "budget")?
            .value()
            .map_err(|message| ConfigFileError::Value { section: S, key: "budget", message })?;
        let task_name = need(e.task, S, "task")?;
        let kind = TaskKind::parse(&task_name).ok_or_else(|| ConfigFileError::Value {
            section: S,
            key: "task",
            message: format!("unknown task {task_name:?} (known: sequence_copy, next_token_synthetic, binary_qa_synthetic)"),
        })?;
        let seed = e.task_seed.unwrap_or(0);
        let mut task = ToyTask::new(kind, mezo_model.vocab_size, e.seq_len.unwrap_or(mezo_model.context_length), seed);
        if let Some(a) = e.answer_tokens {
            task.answer_tokens = a;
        }
        let pretrain = match &self.pretrain {
            None => None,
            Some(p) => {
                const P: &str = "pretrain";
                let mut ptask = ToyTask { seed: p.task_seed.unwrap_or(seed), ..task };
                if let Some(a) = p.answer_tokens {
                    ptask.answer_tokens = a;
                }
                Some(Pretraining {
                    task: ptask,
                    steps: need(p.steps, P, "steps")?,
                    learning_rate: need(p.learning_rate, P, "learning_rate")?,
                })
            }
        };
        Ok(ExperimentPlan {
            budget_bytes,
            bp_model,
            mezo_model,
            task,
            pretrain,
            steps: need(e.steps, S, "steps")?,
            eval_every: need(e.eval_every, S, "eval_every")?,
            eval_examples: e.eval_examples.unwrap_or(512),
            lr_grid_bp: need(e.lr_grid_bp, S, "lr_grid_bp")?,
            lr_grid_mezo: need(e.lr_grid_mezo, S, "lr_grid_mezo")?,
            zo: self.zo_config()?,
            run_seed: e.run_seed.unwrap_or(0),
        })
    }
}
