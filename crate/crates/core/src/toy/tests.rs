use super::*;
use crate::memory::{param_elements, ParamCount};

pub(crate) fn desk_config() -> ModelConfig {
    ModelConfig {
        context_length: 8,
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 4,
        kv_heads: 4,
        num_mlps: 2,
        expansion_factor: 4.0,
        vocab_size: 32,
        batch_size: 2,
        bytes_per_param: 8.0,
        stored_layers: 1.0,
    }
}

fn tokens_for(cfg: &ModelConfig, batch: usize, salt: u64) -> Vec<usize> {
    (0..batch * cfg.context_length)
        .map(|i| (crate::noise::mix(salt ^ i as u64) % cfg.vocab_size as u64) as usize)
        .collect()
}

#[test]
fn param_count_matches_generic_formula() {
    for cfg in [desk_config(), ModelConfig { num_layers: 3, hidden_dim: 24, num_heads: 2, kv_heads: 2, ..desk_config() }] {
        let model = ToyModel::new(cfg).unwrap();
        let generic = param_elements(&cfg, ParamCount::Generic).unwrap() as usize;
        assert_eq!(model.num_params(), generic + model.norm_gain_count());
        assert_eq!(model.init_params(0).len(), model.num_params());
    }
}

#[test]
fn unsupported_configs() {
    let c = desk_config();
    assert!(matches!(ToyModel::new(ModelConfig { kv_heads: 2, ..c }), Err(ToyError::Unsupported(_))));
    assert!(matches!(ToyModel::new(ModelConfig { num_mlps: 3, ..c }), Err(ToyError::Unsupported(_))));
    assert!(matches!(ToyModel::new(ModelConfig { expansion_factor: 2.7, ..c }), Err(ToyError::Unsupported(_))));
    assert!(matches!(ToyModel::new(ModelConfig { num_heads: 16, ..c }), Err(ToyError::Unsupported(_))));
}

#[test]
fn single_token_shape() {
    let model = ToyModel::new(desk_config()).unwrap();
    let p = model.init_params(1);
    let out = model.forward(&p, &[3], 1, LedgerMode::Bp).unwrap();
    assert_eq!((out.logits.batch, out.logits.seq_len, out.logits.vocab), (1, 1, 32));
    assert_eq!(out.logits.data.len(), 32);
    assert!(out.logits.data.iter().all(|v| v.is_finite()));
}

#[test]
fn input_errors() {
    let model = ToyModel::new(desk_config()).unwrap();
    let p = model.init_params(1);
    assert!(matches!(model.forward(&p, &[3, 40], 1, LedgerMode::Bp), Err(ToyError::TokenOutOfRange { token: 40, .. })));
    assert!(matches!(model.forward(&p, &[1; 9], 1, LedgerMode::Bp), Err(ToyError::Shape(_))));
    assert!(matches!(model.forward(&p, &[1; 5], 2, LedgerMode::Bp), Err(ToyError::Shape(_))));
    let wrong = ParameterVector::from_values(vec![0.0; p.len()]);
    assert!(matches!(model.forward(&wrong, &[1], 1, LedgerMode::Bp), Err(ToyError::Layout)));
}

#[test]
fn zero_head_gives_zero_logits() {
    let model = ToyModel::new(desk_config()).unwrap();
    let mut p = model.zero_params();
    let embed = model.init_params(2).segment("embed").unwrap().to_vec();
    p.segment_mut("embed").unwrap().copy_from_slice(&embed);
    let tokens = tokens_for(model.config(), 2, 5);
    let out = model.forward(&p, &tokens, 2, LedgerMode::Bp).unwrap();
    assert!(out.logits.data.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_golden_snapshot() {
    let model = ToyModel::new(desk_config()).unwrap();
    let p = model.init_params(20240601);
    let tokens = tokens_for(model.config(), 1, 17);
    let a = model.logits(&p, &tokens, 1).unwrap();
    let b = model.logits(&p, &tokens, 1).unwrap();
    assert_eq!(a, b);
    let probe: Vec<u64> = [0, 31, 100, 255].iter().map(|&i| a.data[i].to_bits()).collect();
    assert_eq!(probe, GOLDEN);
}

const GOLDEN: [u64; 4] = [13832232159832436244, 4605487656495652125, 4610359724154256078, 4600904971487748390];

#[test]
fn uniform_logits_give_log_vocab() {
    let logits = Logits { batch: 1, seq_len: 3, vocab: 32, data: vec![0.7; 96] };
    let l = cross_entropy(&logits, &[Some(1), None, Some(31)]).unwrap();
    assert!((l - 32f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_logits_give_near_zero_loss() {
    let mut data = vec![0.0; 8];
    data[5] = 60.0;
    let logits = Logits { batch: 1, seq_len: 1, vocab: 8, data };
    assert!(cross_entropy(&logits, &[Some(5)]).unwrap() < 1e-20);
}

#[test]
fn cross_entropy_matches_naive_log_softmax() {
    let model = ToyModel::new(desk_config()).unwrap();
    let p = model.init_params(4);
    let tokens = tokens_for(model.config(), 2, 8);
    let targets: Vec<Option<usize>> = tokens.iter().map(|&t| if t % 3 == 0 { None } else { Some((t * 7) % 32) }).collect();
    let logits = model.logits(&p, &tokens, 2).unwrap();
    let mut sum = 0.0;
    let mut count = 0.0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let row = &logits.data[r * 32..(r + 1) * 32];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            sum += -(row[*t].exp() / z).ln();
            count += 1.0;
        }
    }
    let l = cross_entropy(&logits, &targets).unwrap();
    assert!((l - sum / count).abs() < 1e-12);
    assert!(cross_entropy(&logits, &targets[1..]).is_err());
    assert!(cross_entropy(&logits, &vec![None; targets.len()]).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let cfg = desk_config();
    let model = ToyModel::new(cfg).unwrap();
    let p = model.init_params(6);
    let tokens = tokens_for(&cfg, 2, 1);
    let (logits, _, cache) = model.run_forward(p.values(), &tokens, 2, 8, LedgerMode::Bp, cfg.num_layers);
    let n = 8;
    for layer in &cache.unwrap().layers {
        for (i, row) in layer.probs.chunks_exact(n).enumerate() {
            let t = i % n;
            let s: f64 = row[..=t].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row[t + 1..].iter().all(|&v| v == 0.0));
        }
    }
    for row in logits.data.chunks_exact(cfg.vocab_size) {
        let lse = log_sum_exp(row);
        let s: f64 = row.iter().map(|z| (z - lse).exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn causal_mask_holds() {
    let model = ToyModel::new(desk_config()).unwrap();
    let p = model.init_params(9);
    let tokens = tokens_for(model.config(), 1, 3);
    let base = model.logits(&p, &tokens, 1).unwrap();
    for j in 0..8 {
        let mut changed = tokens.clone();
        changed[j] = (changed[j] + 1) % 32;
        let out = model.logits(&p, &changed, 1).unwrap();
        for t in 0..j {
            assert_eq!(out.row(0, t), base.row(0, t), "position {t} saw token {j}");
        }
        assert_ne!(out.row(0, j), base.row(0, j));
    }
}

#[test]
fn backward_matches_finite_differences() {
    let worst = crate::verify::gradient_check(7, 256).unwrap();
    eprintln!("worst relative error {worst:e}");
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn unused_embedding_rows_get_no_gradient() {
    let cfg = desk_config();
    let model = ToyModel::new(cfg).unwrap();
    let p = model.init_params(3);
    let tokens: Vec<usize> = (0..16).map(|i| i % 10).collect();
    let targets: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t)).collect();
    let g = model.backward(&p, &tokens, &targets, 2).unwrap();
    let embed = g.grad.segment("embed").unwrap();
    for tok in 10..32 {
        assert!(embed[tok * 16..(tok + 1) * 16].iter().all(|&v| v == 0.0));
    }
    assert!(embed[..16].iter().any(|&v| v != 0.0));
    // zero-step SGD leaves the weights alone
    let mut q = p.clone();
    let mut f = |w: &ParameterVector| {
        let g = model.backward(w, &tokens, &targets, 2).unwrap();
        (g.loss, g.grad.values().to_vec())
    };
    crate::zo::bp_sgd_step(&mut f, &mut q, 0.0).unwrap();
    assert_eq!(p, q);
}

#[test]
fn forward_and_backward_agree_on_loss() {
    let cfg = desk_config();
    let model = ToyModel::new(cfg).unwrap();
    let p = model.init_params(12);
    let tokens = tokens_for(&cfg, 2, 2);
    let targets: Vec<Option<usize>> = tokens.iter().map(|&t| Some(31 - t)).collect();
    let g = model.backward(&p, &tokens, &targets, 2).unwrap();
    assert_eq!(g.loss, model.loss(&p, &tokens, &targets, 2).unwrap());
}

fn bp_ledger(cfg: ModelConfig) -> ActivationLedger {
    let model = ToyModel::new(cfg).unwrap();
    let p = model.init_params(1);
    let tokens = tokens_for(&cfg, cfg.batch_size, 4);
    model.forward(&p, &tokens, cfg.batch_size, LedgerMode::Bp).unwrap().ledger
}

#[test]
fn ledger_scaling_laws() {
    let cfg = ModelConfig { num_layers: 4, ..desk_config() };
    let base = bp_ledger(cfg);
    let report = ledger_check(&cfg, &base).unwrap();
    assert!(report.scores_exact);
    assert_eq!(base.attention_scores_elements, 2 * 4 * 4 * 8 * 8);
    // q, k, v, o + hpre, hact (R = 4) + four norm tensors
    assert_eq!(report.non_score_per_bnld, 4.0 + 8.0 + 4.0);

    let long = ModelConfig { context_length: 16, ..cfg };
    assert!(compare_scaling(&base, &bp_ledger(long), ScalingAxis::ContextLength).is_empty());
    assert_eq!(bp_ledger(long).attention_scores_elements, 4 * base.attention_scores_elements);
    let wide = ModelConfig { hidden_dim: 32, ..cfg };
    let wide_ledger = bp_ledger(wide);
    assert!(compare_scaling(&base, &wide_ledger, ScalingAxis::HiddenDim).is_empty());
    assert_eq!(wide_ledger.ffn_elements, 2 * base.ffn_elements);
    assert_eq!(wide_ledger.attention_scores_elements, base.attention_scores_elements);
    assert!(!compare_scaling(&base, &wide_ledger, ScalingAxis::ContextLength).is_empty());
}

#[test]
fn ledger_check_rejects_mismatch() {
    let cfg = desk_config();
    let ledger = bp_ledger(cfg);
    assert!(ledger_check(&ModelConfig { context_length: 4, ..cfg }, &ledger).is_err());
    let model = ToyModel::new(cfg).unwrap();
    let mezo = model.forward(&model.init_params(0), &tokens_for(&cfg, 2, 0), 2, LedgerMode::Mezo).unwrap().ledger;
    assert!(ledger_check(&cfg, &mezo).is_err());
}

#[test]
fn mezo_ledger_keeps_at_most_ceil_stored_layers() {
    let cfg = ModelConfig { num_layers: 4, ..desk_config() };
    let model = ToyModel::new(cfg).unwrap();
    let p = model.init_params(0);
    let tokens = tokens_for(&cfg, 2, 0);
    let bp = model.forward(&p, &tokens, 2, LedgerMode::Bp).unwrap().ledger;
    for (stored, layers) in [(0.0, 0), (0.5, 1), (1.0, 1), (2.3, 3), (4.0, 4)] {
        let m = ToyModel::new(ModelConfig { stored_layers: stored, ..cfg }).unwrap();
        let l = m.forward(&p, &tokens, 2, LedgerMode::Mezo).unwrap().ledger;
        assert_eq!(l.retained_layers, layers);
        assert_eq!(l.per_layer_retained() * 4, bp.per_layer_retained() * layers);
    }
    let one = model.forward(&p, &tokens, 2, LedgerMode::Mezo).unwrap();
    assert!(one.ledger.per_layer_retained() * cfg.num_layers <= bp.per_layer_retained());
    // buffering policy never changes the numbers
    assert_eq!(one.logits, model.forward(&p, &tokens, 2, LedgerMode::Bp).unwrap().logits);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = desk_config();
    let model = ToyModel::new(cfg).unwrap();
    let mut p = model.init_params(42);
    p.values_mut()[0] = -0.0;
    p.values_mut()[1] = f64::MIN_POSITIVE / 3.0;
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &cfg, &p).unwrap();
    let (cfg2, p2) = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(cfg, cfg2);
    assert_eq!(p.segments(), p2.segments());
    let bits = |v: &ParameterVector| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&p), bits(&p2));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad[..]), Err(CheckpointError::Magic)));
    assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(CheckpointError::Io(_))));
}
