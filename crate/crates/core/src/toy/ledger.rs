use super::ToyError;
use crate::memory::ModelConfig;
use serde::Serialize;
use std::ops::{AddAssign, SubAssign};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LedgerMode {
    /// Every layer's activations are kept for the backward pass.
    Bp,
    /// Forward only; at most `⌈L'⌉` layers are buffered at a time.
    Mezo,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct LayerCounts {
    pub attention_proj: usize,
    pub attention_scores: usize,
    pub ffn: usize,
    pub norm: usize,
}

impl LayerCounts {
    fn total(&self) -> usize {
        self.attention_proj + self.attention_scores + self.ffn + self.norm
    }
}

impl AddAssign for LayerCounts {
    fn add_assign(&mut self, o: Self) {
        self.attention_proj += o.attention_proj;
        self.attention_scores += o.attention_scores;
        self.ffn += o.ffn;
        self.norm += o.norm;
    }
}

impl SubAssign for LayerCounts {
    fn sub_assign(&mut self, o: Self) {
        self.attention_proj -= o.attention_proj;
        self.attention_scores -= o.attention_scores;
        self.ffn -= o.ffn;
        self.norm -= o.norm;
    }
}

/// Element counts of the activations a forward pass kept alive, by category.
///
/// Per-layer categories (`attention_*`, `ffn`, `norm`) are the peak over the pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationLedger {
    pub mode: LedgerMode,
    pub batch: usize,
    pub seq_len: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Token ids kept for the embedding gradient.
    pub embeddings_elements: usize,
    /// Post-RoPE queries and keys, values, and the per-head attention output.
    pub attention_proj_elements: usize,
    /// Softmax probabilities, full `N×N` per head.
    pub attention_scores_elements: usize,
    /// FFN pre- and post-activation.
    pub ffn_elements: usize,
    /// Inputs and outputs of the two per-layer RMSNorms.
    pub norm_elements: usize,
    /// Input and output of the final RMSNorm.
    pub norm_final_elements: usize,
    pub logits_elements: usize,
    /// Layers whose caches were alive at the peak.
    pub retained_layers: usize,
}

impl ActivationLedger {
    pub(crate) fn new(mode: LedgerMode, batch: usize, seq_len: usize, cfg: &ModelConfig) -> Self {
        ActivationLedger {
            mode,
            batch,
            seq_len,
            num_layers: cfg.num_layers,
            hidden_dim: cfg.hidden_dim,
            num_heads: cfg.num_heads,
            embeddings_elements: 0,
            attention_proj_elements: 0,
            attention_scores_elements: 0,
            ffn_elements: 0,
            norm_elements: 0,
            norm_final_elements: 0,
            logits_elements: 0,
            retained_layers: 0,
        }
    }

    pub(crate) fn observe_layers(&mut self, live: LayerCounts, layers: usize) {
        if live.total() > self.per_layer_retained() {
            self.attention_proj_elements = live.attention_proj;
            self.attention_scores_elements = live.attention_scores;
            self.ffn_elements = live.ffn;
            self.norm_elements = live.norm;
            self.retained_layers = layers;
        }
    }

    /// Sum of the per-layer categories.
    pub fn per_layer_retained(&self) -> usize {
        self.attention_proj_elements + self.attention_scores_elements + self.ffn_elements + self.norm_elements
    }

    pub fn total(&self) -> usize {
        self.per_layer_retained() + self.embeddings_elements + self.norm_final_elements + self.logits_elements
    }
}

/// Empirical counts of a BP-mode ledger set against the activation formula's terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerReport {
    /// `B·L·H·N²`
    pub expected_scores: usize,
    pub scores_exact: bool,
    /// Per-layer elements other than attention scores.
    pub non_score_elements: usize,
    /// `non_score_elements / (B·L·N·D)`
    pub non_score_per_bnld: f64,
    pub attention_proj_per_bnld: f64,
    pub ffn_per_bnld: f64,
    pub norm_per_bnld: f64,
}

impl LedgerReport {
    pub fn passed(&self) -> bool {
        self.scores_exact
    }
}

pub fn ledger_check(cfg: &ModelConfig, ledger: &ActivationLedger) -> Result<LedgerReport, ToyError> {
    let mismatch = |what: &str, cfg_v: usize, ledger_v: usize| {
        ToyError::Shape(format!("ledger {what} = {ledger_v} but config has {cfg_v}"))
    };
    if ledger.mode != LedgerMode::Bp {
        return Err(ToyError::Shape("ledger_check needs a BP-mode ledger".into()));
    }
    for (what, c, l) in [
        ("batch", cfg.batch_size, ledger.batch),
        ("seq_len", cfg.context_length, ledger.seq_len),
        ("num_layers", cfg.num_layers, ledger.num_layers),
        ("hidden_dim", cfg.hidden_dim, ledger.hidden_dim),
        ("num_heads", cfg.num_heads, ledger.num_heads),
    ] {
        if c != l {
            return Err(mismatch(what, c, l));
        }
    }
    let (b, l, n, d, h) = (cfg.batch_size, cfg.num_layers, cfg.context_length, cfg.hidden_dim, cfg.num_heads);
    let expected_scores = b * l * h * n * n;
    let non_score = ledger.attention_proj_elements + ledger.ffn_elements + ledger.norm_elements;
    let bnld = (b * l * n * d) as f64;
    Ok(LedgerReport {
        expected_scores,
        scores_exact: ledger.attention_scores_elements == expected_scores,
        non_score_elements: non_score,
        non_score_per_bnld: non_score as f64 / bnld,
        attention_proj_per_bnld: ledger.attention_proj_elements as f64 / bnld,
        ffn_per_bnld: ledger.ffn_elements as f64 / bnld,
        norm_per_bnld: ledger.norm_elements as f64 / bnld,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingAxis {
    ContextLength,
    HiddenDim,
}

/// Checks how each per-layer category moved between `base` and `doubled`, where
/// `doubled` differs from `base` only by a factor of two along `axis`. Returns one
/// message per violated scaling law; empty means every law held exactly.
pub fn compare_scaling(base: &ActivationLedger, doubled: &ActivationLedger, axis: ScalingAxis) -> Vec<String> {
    let mut out = Vec::new();
    let (dn, dd) = match axis {
        ScalingAxis::ContextLength => (2, 1),
        ScalingAxis::HiddenDim => (1, 2),
    };
    if doubled.seq_len != base.seq_len * dn
        || doubled.hidden_dim != base.hidden_dim * dd
        || doubled.batch != base.batch
        || doubled.num_layers != base.num_layers
        || doubled.num_heads != base.num_heads
    {
        out.push(format!("ledgers are not a single doubling along {axis:?}"));
        return out;
    }
    // scores ∝ N², everything else ∝ N·D
    let laws = [
        ("attention_scores", base.attention_scores_elements, doubled.attention_scores_elements, dn * dn),
        ("attention_proj", base.attention_proj_elements, doubled.attention_proj_elements, dn * dd),
        ("ffn", base.ffn_elements, doubled.ffn_elements, dn * dd),
        ("norm", base.norm_elements, doubled.norm_elements, dn * dd),
    ];
    for (name, before, after, factor) in laws {
        if after != before * factor {
            out.push(format!("{name}: {before} -> {after}, expected x{factor}"));
        }
    }
    out
}
