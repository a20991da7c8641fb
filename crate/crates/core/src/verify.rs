//! Self-checks for the estimator and the toy model, shared by `mezo-budget verify`
//! and the test suites.

use crate::memory::ModelConfig;
use crate::noise::{mix, PerturbationSeed};
use crate::toy::{ToyError, ToyModel};
use crate::zo::{snap, spsa_directional_derivative, ParameterVector, ZoConfig, ZoError};
use serde::Serialize;
use thiserror::Error;

/// Largest flat parameter count `verify` accepts.
pub const MAX_DIM: usize = 4096;
/// Unbiasedness is measured on at most this many coordinates; beyond that the
/// sampling error of 10⁵ directions exceeds the tolerance.
pub const UNBIASED_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("dim must be in 1..={MAX_DIM}, got {0}")]
    Dim(usize),
    #[error(transparent)]
    Zo(#[from] ZoError),
    #[error(transparent)]
    Toy(#[from] ToyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub dim: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub restoration_seeds: u64,
    pub unbiased_directions: u64,
    pub unbiased_tolerance: f64,
    pub gradient_coordinates: usize,
    pub gradient_tolerance: f64,
    pub cosine_trials: u64,
    pub cosine_min_rate: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            dim: 64,
            seed: 0,
            epsilon: ZoConfig::default().epsilon,
            restoration_seeds: 1000,
            unbiased_directions: 100_000,
            unbiased_tolerance: 0.02,
            gradient_coordinates: 256,
            gradient_tolerance: 1e-5,
            cosine_trials: 200,
            cosine_min_rate: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub detail: String,
}

/// `D=16, L=2, H=4, V=32, N=8, B=2`.
pub fn desk_config() -> ModelConfig {
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

/// `½ Σ cᵢ (θᵢ − tᵢ)²` with curvatures in `[0.5, 2)`.
struct Quadratic {
    c: Vec<f64>,
    t: Vec<f64>,
}

impl Quadratic {
    fn new(dim: usize, seed: u64) -> Self {
        let unit = |k: u64| (mix(seed ^ mix(k)) >> 11) as f64 / (1u64 << 53) as f64;
        Quadratic {
            c: (0..dim as u64).map(|i| 0.5 + 1.5 * unit(2 * i)).collect(),
            t: (0..dim as u64).map(|i| 2.0 * unit(2 * i + 1) - 1.0).collect(),
        }
    }

    fn loss(&self, p: &ParameterVector) -> f64 {
        p.values().iter().zip(self.c.iter().zip(&self.t)).map(|(x, (c, t))| 0.5 * c * (x - t) * (x - t)).sum()
    }

    fn grad(&self, p: &ParameterVector) -> Vec<f64> {
        p.values().iter().zip(self.c.iter().zip(&self.t)).map(|(x, (c, t))| c * (x - t)).collect()
    }

    fn start(&self, seed: u64) -> ParameterVector {
        let unit = |k: u64| (mix(seed ^ mix(k)) >> 11) as f64 / (1u64 << 53) as f64;
        ParameterVector::from_values((0..self.c.len() as u64).map(|i| snap(4.0 * unit(i) - 2.0)).collect())
    }
}

/// Perturb-and-restore across `seeds` directions; every coordinate must come back
/// with the same bits.
pub fn restoration_check(dim: usize, seed: u64, seeds: u64, epsilon: f64) -> Result<Check, ZoError> {
    let q = Quadratic::new(dim, seed);
    let mut theta = q.start(seed ^ 1);
    let before: Vec<u64> = theta.values().iter().map(|v| v.to_bits()).collect();
    let mut broken = 0u64;
    for s in 0..seeds {
        spsa_directional_derivative(&mut |p: &ParameterVector| q.loss(p), &mut theta, PerturbationSeed::new(mix(seed) ^ s, 0), epsilon)?;
        if theta.values().iter().zip(&before).any(|(v, b)| v.to_bits() != *b) {
            broken += 1;
            theta = ParameterVector::from_values(before.iter().map(|b| f64::from_bits(*b)).collect());
        }
    }
    Ok(Check {
        name: "restoration",
        passed: broken == 0,
        value: broken as f64,
        detail: format!("{broken} of {seeds} perturb/restore cycles changed a bit (dim {dim})"),
    })
}

/// Mean of `g·z` over many directions against the exact gradient of a quadratic.
/// Returns the relative error `‖mean − ∇‖ / ‖∇‖`.
pub fn unbiasedness_error(dim: usize, seed: u64, directions: u64, epsilon: f64) -> Result<f64, ZoError> {
    let q = Quadratic::new(dim, seed);
    let mut theta = q.start(seed ^ 2);
    let exact = q.grad(&theta);
    let mut mean = vec![0.0; dim];
    for s in 0..directions {
        let ps = PerturbationSeed::new(mix(seed ^ 0x5eed) ^ s, 0);
        let g = spsa_directional_derivative(&mut |p: &ParameterVector| q.loss(p), &mut theta, ps, epsilon)?;
        for (m, z) in mean.iter_mut().zip(ps.stream()) {
            *m += g * z;
        }
    }
    let k = directions as f64;
    let err: f64 = mean.iter().zip(&exact).map(|(m, e)| (m / k - e).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = exact.iter().map(|e| e * e).sum::<f64>().sqrt();
    Ok(err / norm)
}

fn desk_batch(cfg: &ModelConfig, seed: u64) -> (Vec<usize>, Vec<Option<usize>>) {
    let v = cfg.vocab_size as u64;
    let tokens: Vec<usize> =
        (0..(cfg.batch_size * cfg.context_length) as u64).map(|i| (mix(seed ^ mix(i)) % v) as usize).collect();
    let targets = tokens.iter().map(|&t| Some((t + 1) % cfg.vocab_size)).collect();
    (tokens, targets)
}

/// Backward pass against central differences (`h = 1e-5`) on `coords` coordinates
/// spread over the whole parameter vector. Returns the worst
/// `|fd − an| / max(|fd|, |an|, 1e-6)`.
pub fn gradient_check(seed: u64, coords: usize) -> Result<f64, ToyError> {
    let cfg = desk_config();
    let model = ToyModel::new(cfg)?;
    let mut p = model.init_params(seed);
    let (tokens, targets) = desk_batch(&cfg, seed);
    let b = cfg.batch_size;
    let grad = model.backward(&p, &tokens, &targets, b)?;
    let h = 1e-5;
    let stride = (p.len() / coords.max(1)).max(1);
    let mut worst: f64 = 0.0;
    for c in 0..coords.min(p.len()) {
        let i = c * stride + (mix(seed + c as u64) as usize % stride);
        let orig = p.values()[i];
        p.values_mut()[i] = orig + h;
        let up = model.loss(&p, &tokens, &targets, b)?;
        p.values_mut()[i] = orig - h;
        let down = model.loss(&p, &tokens, &targets, b)?;
        p.values_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grad.grad.values()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    Ok(worst)
}

/// Fraction of trials where the `n`-direction MeZO estimate on the desk transformer
/// has positive cosine with the backprop gradient, and the mean cosine.
pub fn cosine_positivity(seed: u64, trials: u64, zo: &ZoConfig) -> Result<(f64, f64), VerifyError> {
    zo.validate()?;
    let cfg = desk_config();
    let model = ToyModel::new(cfg)?;
    let b = cfg.batch_size;
    let mut positive = 0u64;
    let mut sum = 0.0;
    for trial in 0..trials {
        let mut p = model.init_params(mix(seed ^ trial));
        p.snap_to_grid();
        let (tokens, targets) = desk_batch(&cfg, seed ^ mix(trial));
        let exact = model.backward(&p, &tokens, &targets, b)?.grad;
        let mut est = vec![0.0; p.len()];
        for i in 0..zo.num_perturbations as u64 {
            let ps = PerturbationSeed::for_step(zo.master_seed ^ seed, trial, i);
            let mut f = |q: &ParameterVector| model.loss(q, &tokens, &targets, b).unwrap_or(f64::NAN);
            let g = spsa_directional_derivative(&mut f, &mut p, ps, zo.epsilon)?;
            for (e, z) in est.iter_mut().zip(ps.stream()) {
                *e += g * z;
            }
        }
        let dot: f64 = est.iter().zip(exact.values()).map(|(a, b)| a * b).sum();
        let na: f64 = est.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = exact.values().iter().map(|b| b * b).sum::<f64>().sqrt();
        let cos = dot / (na * nb);
        positive += (cos > 0.0) as u64;
        sum += cos;
    }
    Ok((positive as f64 / trials as f64, sum / trials as f64))
}

/// Runs all four checks.
pub fn run_checks(cfg: &VerifyConfig) -> Result<Vec<Check>, VerifyError> {
    if cfg.dim == 0 || cfg.dim > MAX_DIM {
        return Err(VerifyError::Dim(cfg.dim));
    }
    let zo = ZoConfig { epsilon: cfg.epsilon, ..ZoConfig::default() };
    zo.validate()?;
    let mut out = vec![restoration_check(cfg.dim, cfg.seed, cfg.restoration_seeds, cfg.epsilon)?];

    let udim = cfg.dim.min(UNBIASED_DIM);
    let err = unbiasedness_error(udim, cfg.seed, cfg.unbiased_directions, cfg.epsilon)?;
    out.push(Check {
        name: "unbiasedness",
        passed: err <= cfg.unbiased_tolerance,
        value: err,
        detail: format!(
            "relative error {err:.4} of the mean estimate over {} directions (dim {udim}, tolerance {})",
            cfg.unbiased_directions, cfg.unbiased_tolerance
        ),
    });

    let worst = gradient_check(cfg.seed, cfg.gradient_coordinates)?;
    out.push(Check {
        name: "finite-difference gradient",
        passed: worst < cfg.gradient_tolerance,
        value: worst,
        detail: format!("worst relative error {worst:.3e} over {} coordinates", cfg.gradient_coordinates),
    });

    let (rate, mean) = cosine_positivity(cfg.seed, cfg.cosine_trials, &zo)?;
    out.push(Check {
        name: "cosine positivity",
        passed: rate > cfg.cosine_min_rate,
        value: rate,
        detail: format!("{rate:.3} of {} estimates point uphill with the true gradient (mean cosine {mean:.3})", cfg.cosine_trials),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_quadratic() {
        assert!(unbiasedness_error(1, 3, 100_000, 1e-3).unwrap() < 0.02);
        assert!(restoration_check(1, 3, 200, 1e-3).unwrap().passed);
    }

    #[test]
    fn guards() {
        let cfg = VerifyConfig { epsilon: 0.0, ..VerifyConfig::default() };
        assert!(matches!(run_checks(&cfg), Err(VerifyError::Zo(ZoError::BadEpsilon(_)))));
        let cfg = VerifyConfig { dim: MAX_DIM + 1, ..VerifyConfig::default() };
        assert!(matches!(run_checks(&cfg), Err(VerifyError::Dim(_))));
    }

    #[test]
    fn defaults_pass() {
        let checks = run_checks(&VerifyConfig { unbiased_directions: 100_000, ..VerifyConfig::default() }).unwrap();
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
