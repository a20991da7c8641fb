//! Small decoder-only transformer in `f64` with an exact hand-written backward pass.
//!
//! Architecture per layer: RMSNorm → causal multi-head attention with RoPE → residual,
//! RMSNorm → GELU FFN (`D → D·R → D`) → residual. A final RMSNorm feeds an untied LM
//! head. There are no biases and no learned positions, so the trainable elements are
//! exactly the generic parameter count plus `(2L + 1)·D` norm gains.

mod checkpoint;
mod ledger;
mod ops;
mod task;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use ledger::{compare_scaling, ledger_check, ActivationLedger, LedgerMode, LedgerReport, ScalingAxis};
pub use task::{accuracy, Batch, Example, TaskKind, ToyTask, FIRST_CONTENT, SEPARATOR};

use crate::memory::{ConfigError, ModelConfig};
use crate::noise::PerturbationSeed;
use crate::zo::ParameterVector;
use ops::*;
use std::collections::VecDeque;
use thiserror::Error;

const NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("toy model does not support {0}")]
    Unsupported(String),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, position: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter vector layout does not match the model")]
    Layout,
}

/// Offsets of one layer's segments inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_norm: usize,
    up: usize,
    down: usize,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ModelConfig,
    ffn: usize,
    embed: usize,
    layers: Vec<LayerOffsets>,
    final_norm: usize,
    head: usize,
    total: usize,
    segment_names: Vec<(String, usize)>,
}

/// Logits laid out `[batch][position][vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.seq_len + t) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Logits,
    pub ledger: ActivationLedger,
}

/// Tensors kept from one layer's forward pass, rows are `batch·seq_len`.
#[derive(Debug, Clone)]
struct LayerCache {
    x: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    x2: Vec<f64>,
    c: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

impl LayerCache {
    fn counts(&self) -> ledger::LayerCounts {
        ledger::LayerCounts {
            attention_proj: self.q.len() + self.k.len() + self.v.len() + self.o.len(),
            attention_scores: self.probs.len(),
            ffn: self.hpre.len() + self.hact.len(),
            norm: self.x.len() + self.a.len() + self.x2.len() + self.c.len(),
        }
    }
}

struct FullCache {
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    xf: Vec<f64>,
}

impl ToyModel {
    /// The toy model supports full multi-head attention (`K = H`), a two-matrix FFN
    /// (`N_M = 2`) with integral width `D·R`, and an even head dimension for RoPE.
    pub fn new(cfg: ModelConfig) -> Result<Self, ToyError> {
        cfg.validate()?;
        if cfg.kv_heads != cfg.num_heads {
            return Err(ToyError::Unsupported(format!(
                "kv_heads = {} != num_heads = {}",
                cfg.kv_heads, cfg.num_heads
            )));
        }
        if cfg.num_mlps != 2 {
            return Err(ToyError::Unsupported(format!("num_mlps = {}", cfg.num_mlps)));
        }
        let width = cfg.hidden_dim as f64 * cfg.expansion_factor;
        if (width - width.round()).abs() > 1e-9 {
            return Err(ToyError::Unsupported(format!("non-integral FFN width {width}")));
        }
        if cfg.head_dim() % 2 != 0 {
            return Err(ToyError::Unsupported(format!("odd head dimension {}", cfg.head_dim())));
        }
        let d = cfg.hidden_dim;
        let v = cfg.vocab_size;
        let ffn = cfg.ffn_hidden();
        let mut names = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize| {
            let at = offset;
            names.push((name, len));
            offset += len;
            at
        };
        let embed = push("embed".into(), v * d);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            layers.push(LayerOffsets {
                attn_norm: push(format!("layer{l}.attn_norm"), d),
                wq: push(format!("layer{l}.wq"), d * d),
                wk: push(format!("layer{l}.wk"), d * d),
                wv: push(format!("layer{l}.wv"), d * d),
                wo: push(format!("layer{l}.wo"), d * d),
                ffn_norm: push(format!("layer{l}.ffn_norm"), d),
                up: push(format!("layer{l}.ffn_up"), d * ffn),
                down: push(format!("layer{l}.ffn_down"), ffn * d),
            });
        }
        let final_norm = push("final_norm".into(), d);
        let head = push("lm_head".into(), v * d);
        Ok(ToyModel { cfg, ffn, embed, layers, final_norm, head, total: offset, segment_names: names })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    /// RMSNorm gains, `(2L + 1)·D`.
    pub fn norm_gain_count(&self) -> usize {
        (2 * self.cfg.num_layers + 1) * self.cfg.hidden_dim
    }

    pub fn zero_params(&self) -> ParameterVector {
        ParameterVector::zeros(self.segment_names.iter().map(|(n, l)| (n.clone(), *l)))
    }

    /// Matrices drawn from `N(0, 1/D)`, norm gains set to one. Segment `i` uses noise
    /// stream `i` of `seed`.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut p = self.zero_params();
        let scale = 1.0 / (self.cfg.hidden_dim as f64).sqrt();
        let segments = p.segments().to_vec();
        let values = p.values_mut();
        for (i, s) in segments.iter().enumerate() {
            let dst = &mut values[s.offset..s.offset + s.len];
            if s.name.ends_with("norm") {
                dst.fill(1.0);
            } else {
                for (x, z) in dst.iter_mut().zip(PerturbationSeed::new(seed, i as u64).stream()) {
                    *x = scale * z;
                }
            }
        }
        p
    }

    fn check_params(&self, params: &ParameterVector) -> Result<(), ToyError> {
        let segs = params.segments();
        if params.len() != self.total
            || segs.len() != self.segment_names.len()
            || segs.iter().zip(&self.segment_names).any(|(s, (n, l))| &s.name != n || s.len != *l)
        {
            return Err(ToyError::Layout);
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize, ToyError> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(ToyError::Shape(format!("{} tokens do not split into {batch} sequences", tokens.len())));
        }
        let n = tokens.len() / batch;
        if n > self.cfg.context_length {
            return Err(ToyError::Shape(format!(
                "sequence length {n} exceeds context length {}",
                self.cfg.context_length
            )));
        }
        let vocab = self.cfg.vocab_size;
        if let Some(position) = tokens.iter().position(|&t| t >= vocab) {
            return Err(ToyError::TokenOutOfRange { token: tokens[position], position, vocab });
        }
        Ok(n)
    }

    /// Forward pass over `batch` sequences packed row-major in `tokens`.
    ///
    /// In [`LedgerMode::Bp`] every layer's cache is retained (and counted); in
    /// [`LedgerMode::Mezo`] at most `⌈L'⌉` layer caches are alive at once.
    pub fn forward(
        &self,
        params: &ParameterVector,
        tokens: &[usize],
        batch: usize,
        mode: LedgerMode,
    ) -> Result<ForwardOutput, ToyError> {
        self.check_params(params)?;
        let n = self.check_tokens(tokens, batch)?;
        let window = match mode {
            LedgerMode::Bp => self.cfg.num_layers,
            LedgerMode::Mezo => (self.cfg.stored_layers.ceil() as usize).min(self.cfg.num_layers),
        };
        let (logits, ledger, _) = self.run_forward(params.values(), tokens, batch, n, mode, window);
        Ok(ForwardOutput { logits, ledger })
    }

    fn run_forward(
        &self,
        w: &[f64],
        tokens: &[usize],
        batch: usize,
        n: usize,
        mode: LedgerMode,
        window: usize,
    ) -> (Logits, ActivationLedger, Option<FullCache>) {
        let d = self.cfg.hidden_dim;
        let v = self.cfg.vocab_size;
        let rows = batch * n;
        let mut ledger = ActivationLedger::new(mode, batch, n, &self.cfg);
        ledger.embeddings_elements = tokens.len();

        let mut x = vec![0.0; rows * d];
        for (r, &t) in tokens.iter().enumerate() {
            x[r * d..(r + 1) * d].copy_from_slice(&w[self.embed + t * d..self.embed + (t + 1) * d]);
        }
        let rope = RopeTable::new(n, self.cfg.head_dim(), ROPE_BASE);
        let mut retained: VecDeque<LayerCache> = VecDeque::new();
        let mut live = ledger::LayerCounts::default();
        let mut kept = Vec::new();
        for off in &self.layers {
            let cache = self.layer_forward(w, off, x, batch, n, &rope);
            x = cache_output(&cache, w, off, self.ffn, d);
            if window > 0 {
                live += cache.counts();
                retained.push_back(cache);
                if retained.len() > window {
                    let dropped = retained.pop_front().unwrap();
                    live -= dropped.counts();
                    if mode == LedgerMode::Bp {
                        kept.push(dropped);
                    }
                }
            }
            ledger.observe_layers(live, retained.len());
        }

        let mut xf = vec![0.0; rows * d];
        rmsnorm_forward(&x, &w[self.final_norm..self.final_norm + d], d, &mut xf);
        let mut logits = vec![0.0; rows * v];
        matmul_bt(&xf, &w[self.head..self.head + v * d], rows, d, v, &mut logits);
        ledger.norm_final_elements = x.len() + xf.len();
        ledger.logits_elements = logits.len();

        let cache = if mode == LedgerMode::Bp {
            kept.extend(retained);
            Some(FullCache { layers: kept, x_final: x, xf })
        } else {
            None
        };
        (Logits { batch, seq_len: n, vocab: v, data: logits }, ledger, cache)
    }

    fn layer_forward(
        &self,
        w: &[f64],
        off: &LayerOffsets,
        x: Vec<f64>,
        batch: usize,
        n: usize,
        rope: &RopeTable,
    ) -> LayerCache {
        let d = self.cfg.hidden_dim;
        let h = self.cfg.num_heads;
        let hd = self.cfg.head_dim();
        let f = self.ffn;
        let rows = batch * n;

        let mut a = vec![0.0; rows * d];
        rmsnorm_forward(&x, &w[off.attn_norm..off.attn_norm + d], d, &mut a);
        let mut q = vec![0.0; rows * d];
        let mut k = vec![0.0; rows * d];
        let mut vv = vec![0.0; rows * d];
        matmul(&a, &w[off.wq..off.wq + d * d], rows, d, d, &mut q);
        matmul(&a, &w[off.wk..off.wk + d * d], rows, d, d, &mut k);
        matmul(&a, &w[off.wv..off.wv + d * d], rows, d, d, &mut vv);
        rope.apply(&mut q, batch, n, h, false);
        rope.apply(&mut k, batch, n, h, false);

        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; batch * h * n * n];
        let mut o = vec![0.0; rows * d];
        for b in 0..batch {
            for head in 0..h {
                let p = &mut probs[((b * h + head) * n) * n..((b * h + head) * n + n) * n];
                for t in 0..n {
                    let qt = &q[(b * n + t) * d + head * hd..(b * n + t) * d + (head + 1) * hd];
                    let row = &mut p[t * n..(t + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..=t {
                        let ku = &k[(b * n + u) * d + head * hd..(b * n + u) * d + (head + 1) * hd];
                        row[u] = dot(qt, ku) * scale;
                        max = max.max(row[u]);
                    }
                    let mut sum = 0.0;
                    for s in &mut row[..=t] {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in &mut row[..=t] {
                        *s /= sum;
                    }
                    let ot = &mut o[(b * n + t) * d + head * hd..(b * n + t) * d + (head + 1) * hd];
                    for u in 0..=t {
                        let vu = &vv[(b * n + u) * d + head * hd..(b * n + u) * d + (head + 1) * hd];
                        axpy(row[u], vu, ot);
                    }
                }
            }
        }

        let mut x2 = x.clone();
        matmul_acc(&o, &w[off.wo..off.wo + d * d], rows, d, d, &mut x2);
        let mut c = vec![0.0; rows * d];
        rmsnorm_forward(&x2, &w[off.ffn_norm..off.ffn_norm + d], d, &mut c);
        let mut hpre = vec![0.0; rows * f];
        matmul(&c, &w[off.up..off.up + d * f], rows, d, f, &mut hpre);
        let hact: Vec<f64> = hpre.iter().map(|&z| gelu(z)).collect();
        LayerCache { x, a, q, k, v: vv, probs, o, x2, c, hpre, hact }
    }

    /// Logits for `batch` sequences. Convenience wrapper around [`forward`](Self::forward)
    /// in MeZO mode.
    pub fn logits(&self, params: &ParameterVector, tokens: &[usize], batch: usize) -> Result<Logits, ToyError> {
        self.forward(params, tokens, batch, LedgerMode::Mezo).map(|o| o.logits)
    }

    /// Mean next-token cross-entropy over the positions that carry a target.
    pub fn loss(
        &self,
        params: &ParameterVector,
        tokens: &[usize],
        targets: &[Option<usize>],
        batch: usize,
    ) -> Result<f64, ToyError> {
        cross_entropy(&self.logits(params, tokens, batch)?, targets)
    }

    /// Exact gradient of [`loss`](Self::loss) with respect to every parameter.
    pub fn backward(
        &self,
        params: &ParameterVector,
        tokens: &[usize],
        targets: &[Option<usize>],
        batch: usize,
    ) -> Result<Gradient, ToyError> {
        self.check_params(params)?;
        let n = self.check_tokens(tokens, batch)?;
        let (logits, ledger, cache) =
            self.run_forward(params.values(), tokens, batch, n, LedgerMode::Bp, self.cfg.num_layers);
        let cache = cache.expect("BP forward keeps its cache");
        let (loss, dlogits) = cross_entropy_grad(&logits, targets)?;

        let w = params.values();
        let d = self.cfg.hidden_dim;
        let v = self.cfg.vocab_size;
        let rows = batch * n;
        let mut grad = params.zeros_like();
        let g = grad.values_mut();

        // LM head and final norm
        matmul_at_acc(&dlogits, &cache.xf, rows, v, d, &mut g[self.head..self.head + v * d]);
        let mut dxf = vec![0.0; rows * d];
        matmul(&dlogits, &w[self.head..self.head + v * d], rows, v, d, &mut dxf);
        let mut dx = vec![0.0; rows * d];
        rmsnorm_backward(
            &cache.x_final,
            &w[self.final_norm..self.final_norm + d],
            &dxf,
            d,
            &mut dx,
            &mut g[self.final_norm..self.final_norm + d],
        );

        let rope = RopeTable::new(n, self.cfg.head_dim(), ROPE_BASE);
        for (off, lc) in self.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(w, g, off, lc, dx, batch, n, &rope);
        }
        for (r, &t) in tokens.iter().enumerate() {
            axpy(1.0, &dx[r * d..(r + 1) * d], &mut g[self.embed + t * d..self.embed + (t + 1) * d]);
        }
        Ok(Gradient { loss, grad, ledger })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        w: &[f64],
        g: &mut [f64],
        off: &LayerOffsets,
        lc: &LayerCache,
        dout: Vec<f64>,
        batch: usize,
        n: usize,
        rope: &RopeTable,
    ) -> Vec<f64> {
        let d = self.cfg.hidden_dim;
        let h = self.cfg.num_heads;
        let hd = self.cfg.head_dim();
        let f = self.ffn;
        let rows = batch * n;

        // FFN: x3 = x2 + gelu(c·Wup)·Wdown
        matmul_at_acc(&lc.hact, &dout, rows, f, d, &mut g[off.down..off.down + f * d]);
        let mut dh = vec![0.0; rows * f];
        matmul_bt(&dout, &w[off.down..off.down + f * d], rows, d, f, &mut dh);
        for (dz, &z) in dh.iter_mut().zip(&lc.hpre) {
            *dz *= gelu_grad(z);
        }
        matmul_at_acc(&lc.c, &dh, rows, d, f, &mut g[off.up..off.up + d * f]);
        let mut dc = vec![0.0; rows * d];
        matmul_bt(&dh, &w[off.up..off.up + d * f], rows, f, d, &mut dc);
        let mut dx2 = dout;
        rmsnorm_backward(&lc.x2, &w[off.ffn_norm..off.ffn_norm + d], &dc, d, &mut dx2, &mut g[off.ffn_norm..off.ffn_norm + d]);

        // attention output projection
        matmul_at_acc(&lc.o, &dx2, rows, d, d, &mut g[off.wo..off.wo + d * d]);
        let mut d_o = vec![0.0; rows * d];
        matmul_bt(&dx2, &w[off.wo..off.wo + d * d], rows, d, d, &mut d_o);

        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; n];
        for b in 0..batch {
            for head in 0..h {
                let p = &lc.probs[((b * h + head) * n) * n..((b * h + head) * n + n) * n];
                let span = |t: usize| (b * n + t) * d + head * hd..(b * n + t) * d + (head + 1) * hd;
                for t in 0..n {
                    let row = &p[t * n..(t + 1) * n];
                    let dot_t = &d_o[span(t)];
                    let mut weighted = 0.0;
                    for u in 0..=t {
                        dp[u] = dot(dot_t, &lc.v[span(u)]);
                        weighted += row[u] * dp[u];
                        axpy(row[u], dot_t, &mut dv[span(u)]);
                    }
                    for u in 0..=t {
                        let ds = row[u] * (dp[u] - weighted) * scale;
                        if ds != 0.0 {
                            axpy(ds, &lc.k[span(u)], &mut dq[span(t)]);
                            axpy(ds, &lc.q[span(t)], &mut dk[span(u)]);
                        }
                    }
                }
            }
        }
        rope.apply(&mut dq, batch, n, h, true);
        rope.apply(&mut dk, batch, n, h, true);

        let mut da = vec![0.0; rows * d];
        for (dm, woff) in [(&dq, off.wq), (&dk, off.wk), (&dv, off.wv)] {
            matmul_at_acc(&lc.a, dm, rows, d, d, &mut g[woff..woff + d * d]);
            matmul_bt_acc(dm, &w[woff..woff + d * d], rows, d, d, &mut da);
        }
        let mut dx = dx2;
        rmsnorm_backward(&lc.x, &w[off.attn_norm..off.attn_norm + d], &da, d, &mut dx, &mut g[off.attn_norm..off.attn_norm + d]);
        dx
    }
}

/// Residual output of a cached layer: `x2 + hact·Wdown`.
fn cache_output(cache: &LayerCache, w: &[f64], off: &LayerOffsets, f: usize, d: usize) -> Vec<f64> {
    let rows = cache.x2.len() / d;
    let mut out = cache.x2.clone();
    matmul_acc(&cache.hact, &w[off.down..off.down + f * d], rows, f, d, &mut out);
    out
}

/// Loss, parameter gradient and the BP-mode ledger of the pass that produced them.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub loss: f64,
    pub grad: ParameterVector,
    pub ledger: ActivationLedger,
}

fn check_targets(logits: &Logits, targets: &[Option<usize>]) -> Result<usize, ToyError> {
    let rows = logits.batch * logits.seq_len;
    if targets.len() != rows {
        return Err(ToyError::Shape(format!("{} targets for {rows} positions", targets.len())));
    }
    if let Some(position) = targets.iter().position(|t| matches!(t, Some(t) if *t >= logits.vocab)) {
        return Err(ToyError::TokenOutOfRange { token: targets[position].unwrap(), position, vocab: logits.vocab });
    }
    let scored = targets.iter().filter(|t| t.is_some()).count();
    if scored == 0 {
        return Err(ToyError::Shape("no position carries a target".into()));
    }
    Ok(scored)
}

/// Mean cross-entropy over positions with `Some` target.
pub fn cross_entropy(logits: &Logits, targets: &[Option<usize>]) -> Result<f64, ToyError> {
    let scored = check_targets(logits, targets)?;
    let v = logits.vocab;
    let total: f64 = targets
        .iter()
        .enumerate()
        .filter_map(|(r, t)| t.map(|t| (r, t)))
        .map(|(r, t)| {
            let row = &logits.data[r * v..(r + 1) * v];
            log_sum_exp(row) - row[t]
        })
        .sum();
    Ok(total / scored as f64)
}

fn cross_entropy_grad(logits: &Logits, targets: &[Option<usize>]) -> Result<(f64, Vec<f64>), ToyError> {
    let scored = check_targets(logits, targets)? as f64;
    let v = logits.vocab;
    let mut grad = vec![0.0; logits.data.len()];
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = &logits.data[r * v..(r + 1) * v];
        let lse = log_sum_exp(row);
        total += lse - row[t];
        let out = &mut grad[r * v..(r + 1) * v];
        for (o, &z) in out.iter_mut().zip(row) {
            *o = (z - lse).exp() / scored;
        }
        out[t] -= 1.0 / scored;
    }
    Ok((total / scored, grad))
}

#[cfg(test)]
mod tests;
