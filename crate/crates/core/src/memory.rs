//! Analytic memory model for fine-tuning a decoder-only transformer.
//!
//! Parameters are counted as `12·L·D² + 2·V·D` (four `D×D` attention projections and
//! an `8·D²` FFN per layer, plus embedding and LM head). Activation bytes follow the
//! usual per-layer estimate
//!
//! ```text
//! A = B·L·N·D·(2 + 16b + (2b + 1)·N·H / D)
//! ```
//!
//! and the totals are
//!
//! ```text
//! M_bp   = 24·b·L·D² + 4·b·V·D + A            (A·√L/L when checkpointed)
//! M_mezo = 12·b·L·D² + 2·b·V·D + (L'/L)·A
//! ```
//!
//! Everything is evaluated in `f64`; nothing here rounds to whole bytes.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Architecture and training hyperparameters of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `N`, tokens per sequence.
    pub context_length: usize,
    /// `L`
    pub num_layers: usize,
    /// `D`
    pub hidden_dim: usize,
    /// `H`
    pub num_heads: usize,
    /// `K`, key/value heads. Equal to `num_heads` unless grouped-query attention is modelled.
    pub kv_heads: usize,
    /// `N_M`, weight matrices per FFN block.
    pub num_mlps: usize,
    /// `R`, the FFN hidden width is `D·R`.
    pub expansion_factor: f64,
    /// `V`
    pub vocab_size: usize,
    /// `B`
    pub batch_size: usize,
    /// `b`, bytes per stored element.
    pub bytes_per_param: f64,
    /// `L'`, layers of activations a MeZO runtime keeps buffered. Real valued, `0 ≤ L' ≤ L`.
    pub stored_layers: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{key} must be a positive integer")]
    NotPositive { key: &'static str },
    #[error("{key} must be a positive finite number, got {value}")]
    NotPositiveReal { key: &'static str, value: f64 },
    #[error("stored_layers must lie in [0, num_layers = {num_layers}], got {value}")]
    StoredLayersOutOfRange { value: f64, num_layers: usize },
    #[error("hidden_dim {hidden_dim} is not divisible by num_heads {num_heads}")]
    HeadsDoNotDivide { hidden_dim: usize, num_heads: usize },
}

impl ConfigError {
    /// Config key responsible for the failure.
    pub fn key(&self) -> &'static str {
        match self {
            ConfigError::NotPositive { key } | ConfigError::NotPositiveReal { key, .. } => key,
            ConfigError::StoredLayersOutOfRange { .. } => "stored_layers",
            ConfigError::HeadsDoNotDivide { .. } => "hidden_dim",
        }
    }
}

impl ModelConfig {
    /// LLaMA-2 7B: `B=1, V=32000, N=2048, L=32, b=2, H=32, D=4096`, `L'=1`.
    ///
    /// The FFN is SwiGLU (`N_M = 3`, `R = 8/3`) so that `N_M·R = 8`.
    pub fn llama2_7b() -> Self {
        ModelConfig {
            context_length: 2048,
            num_layers: 32,
            hidden_dim: 4096,
            num_heads: 32,
            kv_heads: 32,
            num_mlps: 3,
            expansion_factor: 8.0 / 3.0,
            vocab_size: 32000,
            batch_size: 1,
            bytes_per_param: 2.0,
            stored_layers: 1.0,
        }
    }

    /// GPT-2 medium at its maximum context with batch size 8, FP16.
    pub fn gpt2_medium() -> Self {
        ModelConfig {
            context_length: 1024,
            num_layers: 24,
            hidden_dim: 1024,
            num_heads: 16,
            kv_heads: 16,
            num_mlps: 2,
            expansion_factor: 4.0,
            vocab_size: 50257,
            batch_size: 8,
            bytes_per_param: 2.0,
            stored_layers: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let ints = [
            ("context_length", self.context_length),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("kv_heads", self.kv_heads),
            ("num_mlps", self.num_mlps),
            ("vocab_size", self.vocab_size),
            ("batch_size", self.batch_size),
        ];
        for (key, value) in ints {
            if value == 0 {
                return Err(ConfigError::NotPositive { key });
            }
        }
        for (key, value) in [
            ("expansion_factor", self.expansion_factor),
            ("bytes_per_param", self.bytes_per_param),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::NotPositiveReal { key, value });
            }
        }
        let l = self.num_layers as f64;
        if !(self.stored_layers.is_finite() && self.stored_layers >= 0.0 && self.stored_layers <= l)
        {
            return Err(ConfigError::StoredLayersOutOfRange {
                value: self.stored_layers,
                num_layers: self.num_layers,
            });
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ConfigError::HeadsDoNotDivide {
                hidden_dim: self.hidden_dim,
                num_heads: self.num_heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// FFN hidden width `D·R`, rounded to the nearest integer.
    pub fn ffn_hidden(&self) -> usize {
        (self.hidden_dim as f64 * self.expansion_factor).round() as usize
    }
}

/// Which parameter-count formula to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamCount {
    /// `12·L·D² + 2·V·D`, the form the memory totals are built from.
    Simplified,
    /// `L·(2D² + 2D²·K/H) + N_M·L·D·(D·R) + 2·V·D`.
    Generic,
}

pub fn param_elements(cfg: &ModelConfig, mode: ParamCount) -> Result<u64, ConfigError> {
    cfg.validate()?;
    let l = cfg.num_layers as u64;
    let d = cfg.hidden_dim as u64;
    let v = cfg.vocab_size as u64;
    let embed = 2 * v * d;
    Ok(match mode {
        ParamCount::Simplified => 12 * l * d * d + embed,
        ParamCount::Generic => {
            // Q and O are D×D; K and V shrink with the number of key/value heads.
            let kv_width = cfg.head_dim() as u64 * cfg.kv_heads as u64;
            let attention = 2 * d * d + 2 * d * kv_width;
            let ffn = cfg.num_mlps as u64 * d * cfg.ffn_hidden() as u64;
            l * (attention + ffn) + embed
        }
    })
}

/// Activation bytes cached by backpropagation across all `L` layers.
pub fn activation_bytes(cfg: &ModelConfig) -> Result<f64, ConfigError> {
    cfg.validate()?;
    Ok(activation_bytes_unchecked(cfg))
}

fn activation_bytes_unchecked(cfg: &ModelConfig) -> f64 {
    let b = cfg.bytes_per_param;
    let n = cfg.context_length as f64;
    let d = cfg.hidden_dim as f64;
    let h = cfg.num_heads as f64;
    let blnd = cfg.batch_size as f64 * cfg.num_layers as f64 * n * d;
    blnd * (2.0 + 16.0 * b + (2.0 * b + 1.0) * n * h / d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MemoryMode {
    Bp,
    BpCheckpointed,
    Mezo,
}

impl MemoryMode {
    pub const ALL: [MemoryMode; 3] = [MemoryMode::Bp, MemoryMode::BpCheckpointed, MemoryMode::Mezo];

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryMode::Bp => "BP",
            MemoryMode::BpCheckpointed => "BP_CHECKPOINTED",
            MemoryMode::Mezo => "MEZO",
        }
    }
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Itemized training memory in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub mode: MemoryMode,
    pub weights_bytes: f64,
    pub gradients_bytes: f64,
    /// Embedding table and LM head, including their gradients under BP.
    pub embedding_head_bytes: f64,
    pub activations_bytes: f64,
    pub total_bytes: f64,
}

impl MemoryBreakdown {
    fn new(mode: MemoryMode, weights: f64, gradients: f64, embedding_head: f64, activations: f64) -> Self {
        MemoryBreakdown {
            mode,
            weights_bytes: weights,
            gradients_bytes: gradients,
            embedding_head_bytes: embedding_head,
            activations_bytes: activations,
            total_bytes: weights + gradients + embedding_head + activations,
        }
    }
}

fn layer_param_bytes(cfg: &ModelConfig) -> f64 {
    let d = cfg.hidden_dim as f64;
    12.0 * cfg.bytes_per_param * cfg.num_layers as f64 * d * d
}

fn embedding_param_bytes(cfg: &ModelConfig) -> f64 {
    cfg.bytes_per_param * cfg.vocab_size as f64 * cfg.hidden_dim as f64
}

/// Backpropagation with stateless SGD. Checkpointing keeps `√L` layers of activations.
pub fn bp_memory(cfg: &ModelConfig, checkpointed: bool) -> Result<MemoryBreakdown, ConfigError> {
    cfg.validate()?;
    let weights = layer_param_bytes(cfg);
    let mut activations = activation_bytes_unchecked(cfg);
    let mode = if checkpointed {
        let l = cfg.num_layers as f64;
        activations *= l.sqrt() / l;
        MemoryMode::BpCheckpointed
    } else {
        MemoryMode::Bp
    };
    Ok(MemoryBreakdown::new(mode, weights, weights, 4.0 * embedding_param_bytes(cfg), activations))
}

pub fn mezo_memory(cfg: &ModelConfig) -> Result<MemoryBreakdown, ConfigError> {
    cfg.validate()?;
    let buffered = cfg.stored_layers / cfg.num_layers as f64;
    Ok(MemoryBreakdown::new(
        MemoryMode::Mezo,
        layer_param_bytes(cfg),
        0.0,
        2.0 * embedding_param_bytes(cfg),
        buffered * activation_bytes_unchecked(cfg),
    ))
}

pub fn memory(cfg: &ModelConfig, mode: MemoryMode) -> Result<MemoryBreakdown, ConfigError> {
    match mode {
        MemoryMode::Bp => bp_memory(cfg, false),
        MemoryMode::BpCheckpointed => bp_memory(cfg, true),
        MemoryMode::Mezo => mezo_memory(cfg),
    }
}

/// MeZO savings factor `M_bp / M_mezo`; values above 1 mean MeZO needs less memory.
pub fn memory_ratio(cfg: &ModelConfig, checkpointed: bool) -> Result<f64, ConfigError> {
    Ok(bp_memory(cfg, checkpointed)?.total_bytes / mezo_memory(cfg)?.total_bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepAxis {
    ContextLength,
    Layers,
    HiddenDim,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ContextLength => "context_length",
            SweepAxis::Layers => "num_layers",
            SweepAxis::HiddenDim => "hidden_dim",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &ModelConfig, value: usize) -> ModelConfig {
        let mut cfg = *base;
        match self {
            SweepAxis::ContextLength => cfg.context_length = value,
            SweepAxis::Layers => cfg.num_layers = value,
            SweepAxis::HiddenDim => cfg.hidden_dim = value,
        }
        cfg
    }

    /// `points` values from `from` to `to`: geometric for context length and hidden
    /// dimension, linear for layers. Values are rounded and duplicates dropped.
    pub fn spaced(self, from: usize, to: usize, points: usize) -> Vec<usize> {
        if points == 0 {
            return Vec::new();
        }
        if points == 1 || from == to {
            return vec![from];
        }
        let steps = (points - 1) as f64;
        let mut out: Vec<usize> = (0..points)
            .map(|i| {
                let t = i as f64 / steps;
                let x = match self {
                    SweepAxis::Layers => from as f64 + t * (to as f64 - from as f64),
                    _ => (from as f64).ln() + t * ((to as f64).ln() - (from as f64).ln()),
                };
                let x = if self == SweepAxis::Layers { x } else { x.exp() };
                x.round() as usize
            })
            .collect();
        // pin the endpoints against exp/ln round-off
        out[0] = from;
        *out.last_mut().unwrap() = to;
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub base: ModelConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis_value: usize,
    pub m_bp: f64,
    pub m_mezo: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error("sweep needs at least one value")]
    Empty,
    #[error("sweep values must be strictly increasing ({prev} then {next})")]
    NotIncreasing { prev: usize, next: usize },
    #[error("{axis} = {value}: {source}")]
    InvalidPoint {
        axis: &'static str,
        value: usize,
        #[source]
        source: ConfigError,
    },
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.values.is_empty() {
            return Err(SweepError::Empty);
        }
        for w in self.values.windows(2) {
            if w[1] <= w[0] {
                return Err(SweepError::NotIncreasing { prev: w[0], next: w[1] });
            }
        }
        Ok(())
    }
}

pub fn sweep(spec: &SweepSpec, checkpointed: bool) -> Result<Vec<SweepRow>, SweepError> {
    spec.validate()?;
    spec.values
        .iter()
        .map(|&value| {
            let cfg = spec.axis.apply(&spec.base, value);
            let point_err = |source| SweepError::InvalidPoint { axis: spec.axis.name(), value, source };
            let m_bp = bp_memory(&cfg, checkpointed).map_err(point_err)?.total_bytes;
            let m_mezo = mezo_memory(&cfg).map_err(point_err)?.total_bytes;
            Ok(SweepRow { axis_value: value, m_bp, m_mezo, ratio: m_bp / m_mezo })
        })
        .collect()
}

/// Axis left free by [`max_dimension`].
/// `axis_value,m_bp,m_mezo,ratio`, one row per point, LF line endings.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis_value,m_bp,m_mezo,ratio\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.axis_value, r.m_bp, r.m_mezo, r.ratio));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FreeAxis {
    /// Searched over multiples of `num_heads`.
    HiddenDim,
    /// Searched from `max(1, ⌈L'⌉)` upwards.
    Layers,
}

impl FreeAxis {
    fn sweep_axis(self) -> SweepAxis {
        match self {
            FreeAxis::HiddenDim => SweepAxis::HiddenDim,
            FreeAxis::Layers => SweepAxis::Layers,
        }
    }

    pub fn step(self, cfg: &ModelConfig) -> usize {
        match self {
            FreeAxis::HiddenDim => cfg.num_heads,
            FreeAxis::Layers => 1,
        }
    }

    /// Smallest admissible value of the axis for `cfg`.
    pub fn min_value(self, cfg: &ModelConfig) -> usize {
        match self {
            FreeAxis::HiddenDim => cfg.num_heads,
            FreeAxis::Layers => (cfg.stored_layers.ceil() as usize).max(1),
        }
    }

    pub fn name(self) -> &'static str {
        self.sweep_axis().name()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("budget {budget} bytes is below the {needed} bytes needed at the smallest {axis} = {min_value}")]
    Infeasible { budget: f64, needed: f64, axis: &'static str, min_value: usize },
    #[error("budget must be a positive finite number of bytes, got {0}")]
    BadBudget(f64),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Solution {
    pub value: usize,
    pub config: ModelConfig,
    pub breakdown: MemoryBreakdown,
}

/// Largest admissible value of `axis` whose total memory under `mode` fits `budget_bytes`.
///
/// Total memory is strictly increasing along both axes, so an exponential search for an
/// infeasible upper bound followed by bisection finds the boundary.
pub fn max_dimension(
    budget_bytes: f64,
    cfg: &ModelConfig,
    axis: FreeAxis,
    mode: MemoryMode,
) -> Result<Solution, SolveError> {
    if !(budget_bytes.is_finite() && budget_bytes > 0.0) {
        return Err(SolveError::BadBudget(budget_bytes));
    }
    let step = axis.step(cfg);
    let first = axis.min_value(cfg);
    let at = |k: usize| -> Result<(ModelConfig, MemoryBreakdown), ConfigError> {
        let c = axis.sweep_axis().apply(cfg, first + (k - 1) * step);
        memory(&c, mode).map(|m| (c, m))
    };
    let (lo_cfg, lo_mem) = at(1)?;
    if lo_mem.total_bytes > budget_bytes {
        return Err(SolveError::Infeasible {
            budget: budget_bytes,
            needed: lo_mem.total_bytes,
            axis: axis.name(),
            min_value: first,
        });
    }
    // Invariant: index `lo` fits, index `hi` does not.
    let mut lo = 1usize;
    let mut best = (lo_cfg, lo_mem);
    let mut hi = 2usize;
    loop {
        let (c, m) = at(hi)?;
        if m.total_bytes > budget_bytes {
            break;
        }
        lo = hi;
        best = (c, m);
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let (c, m) = at(mid)?;
        if m.total_bytes <= budget_bytes {
            lo = mid;
            best = (c, m);
        } else {
            hi = mid;
        }
    }
    Ok(Solution { value: first + (lo - 1) * step, config: best.0, breakdown: best.1 })
}

/// Three significant figures in both binary and decimal units, e.g. `13.4 GiB (14.4 GB)`.
pub fn human_bytes(bytes: f64) -> String {
    const BIN: [&str; 6] = ["B", "KiB", "MiB", "GiB", "TiB", "PiB"];
    const DEC: [&str; 6] = ["B", "kB", "MB", "GB", "TB", "PB"];
    let scaled = |base: f64, units: &[&str; 6]| {
        let mut x = bytes;
        let mut i = 0;
        while x.abs() >= base && i + 1 < units.len() {
            x /= base;
            i += 1;
        }
        format!("{} {}", sig3(x), units[i])
    };
    format!("{} ({})", scaled(1024.0, &BIN), scaled(1000.0, &DEC))
}

fn sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = x.abs().log10().floor() as i32;
    let decimals = (2 - digits).max(0) as usize;
    format!("{x:.decimals$}")
}
