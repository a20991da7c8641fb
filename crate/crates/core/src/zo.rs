//! Zeroth-order (MeZO / SPSA) optimization and the plain SGD baseline.
//!
//! A MeZO step never materializes a perturbation direction. Each direction `z` is a
//! replayable noise stream (see [`crate::noise`]); it is generated once to perturb
//! `θ` by `+εz`, once for `−2εz`, once to restore, and once more for the update.
//!
//! In-place restoration is exact because zeroth-order parameters live on a fixed
//! binary grid of spacing [`PARAM_GRID`] and the realized perturbation `εz` is snapped
//! to the same grid: every shift is then an exact floating-point addition.

use crate::noise::PerturbationSeed;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid spacing for zeroth-order parameters, `2⁻⁴⁰`.
pub const PARAM_GRID: f64 = 1.0 / (1u64 << 40) as f64;

/// Largest parameter magnitude accepted by the zeroth-order routines. Sums of grid
/// values stay exact up to `2¹²`, which leaves room for the perturbation.
pub const PARAM_LIMIT: f64 = 1024.0;

#[inline]
pub fn snap(x: f64) -> f64 {
    // `+ 0.0` folds -0.0 into +0.0, which is what `x + q − 2q + q` returns
    (x / PARAM_GRID).round() * PARAM_GRID + 0.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayoutError {
    #[error("segment {name} starts at {offset}, expected {expected}")]
    Gap { name: String, offset: usize, expected: usize },
    #[error("segments cover {covered} values but the vector holds {len}")]
    Length { covered: usize, len: usize },
    #[error("duplicate segment name {0}")]
    Duplicate(String),
}

/// Flat parameter storage with a named-segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParameterVector {
    /// Zero-filled vector with one segment per `(name, len)` pair, laid out in order.
    pub fn zeros<S: Into<String>>(layout: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, len) in layout {
            segments.push(Segment { name: name.into(), offset, len });
            offset += len;
        }
        ParameterVector { values: vec![0.0; offset], segments }
    }

    /// Single segment named `theta`.
    pub fn from_values(values: Vec<f64>) -> Self {
        let len = values.len();
        ParameterVector { values, segments: vec![Segment { name: "theta".into(), offset: 0, len }] }
    }

    pub fn from_parts(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self, LayoutError> {
        let mut expected = 0;
        let mut names = std::collections::HashSet::new();
        for s in &segments {
            if s.offset != expected {
                return Err(LayoutError::Gap { name: s.name.clone(), offset: s.offset, expected });
            }
            if !names.insert(s.name.as_str()) {
                return Err(LayoutError::Duplicate(s.name.clone()));
            }
            expected += s.len;
        }
        if expected != values.len() {
            return Err(LayoutError::Length { covered: expected, len: values.len() });
        }
        Ok(ParameterVector { values, segments })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let s = &self.segments[self.segment_index(name)?];
        Some(&self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = self.segment_index(name)?;
        let s = &self.segments[i];
        Some(&mut self.values[s.offset..s.offset + s.len])
    }

    /// Zero vector with the same layout.
    pub fn zeros_like(&self) -> Self {
        ParameterVector { values: vec![0.0; self.values.len()], segments: self.segments.clone() }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Quantize every value onto the zeroth-order grid.
    pub fn snap_to_grid(&mut self) {
        for v in &mut self.values {
            *v = snap(*v);
        }
    }

    /// First coordinate that is off the grid or outside `±PARAM_LIMIT`.
    pub fn first_off_grid(&self) -> Option<(usize, f64)> {
        self.values
            .iter()
            .position(|&v| !(v.abs() <= PARAM_LIMIT) || snap(v).to_bits() != v.to_bits())
            .map(|i| (i, self.values[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoConfig {
    /// Perturbation scale `ε`, in `(0, 1]`.
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Directions averaged per step.
    pub num_perturbations: usize,
    pub master_seed: u64,
}

impl Default for ZoConfig {
    fn default() -> Self {
        ZoConfig { epsilon: 1e-3, learning_rate: 1e-6, num_perturbations: 5, master_seed: 0 }
    }
}

impl ZoConfig {
    pub fn validate(&self) -> Result<(), ZoError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(ZoError::BadEpsilon(self.epsilon));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ZoError::BadLearningRate(self.learning_rate));
        }
        if self.num_perturbations == 0 {
            return Err(ZoError::NoPerturbations);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ZoError {
    #[error("epsilon must lie in (0, 1], got {0}")]
    BadEpsilon(f64),
    #[error("learning rate must be finite and non-negative, got {0}")]
    BadLearningRate(f64),
    #[error("need at least one perturbation per step")]
    NoPerturbations,
    #[error("parameter {index} = {value} is off the zeroth-order grid or out of range")]
    OffGrid { index: usize, value: f64 },
    #[error("loss evaluated to {0}")]
    NonFiniteLoss(f64),
    #[error("gradient coordinate {index} is {value}")]
    NonFiniteGrad { index: usize, value: f64 },
    #[error("gradient has {got} coordinates, parameters have {expected}")]
    GradientLength { got: usize, expected: usize },
}

/// `θ ← θ + factor·snap(εz)`. With `factor ∈ {1, −2}` and on-grid `θ` this is exact.
fn shift(theta: &mut ParameterVector, seed: PerturbationSeed, epsilon: f64, factor: f64) {
    for (x, z) in theta.values.iter_mut().zip(seed.stream()) {
        *x += factor * snap(epsilon * z);
    }
}

fn check_grid(theta: &ParameterVector) -> Result<(), ZoError> {
    match theta.first_off_grid() {
        Some((index, value)) => Err(ZoError::OffGrid { index, value }),
        None => Ok(()),
    }
}

/// Central-difference estimate `(ℓ(θ+εz) − ℓ(θ−εz)) / 2ε` of the derivative along `z`.
///
/// `θ` is perturbed in place and restored bit for bit before returning, including
/// on the error path.
pub fn spsa_directional_derivative<F>(
    loss_fn: &mut F,
    theta: &mut ParameterVector,
    seed: PerturbationSeed,
    epsilon: f64,
) -> Result<f64, ZoError>
where
    F: FnMut(&ParameterVector) -> f64,
{
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(ZoError::BadEpsilon(epsilon));
    }
    check_grid(theta)?;
    spsa_unchecked(loss_fn, theta, seed, epsilon).map(|(g, _, _)| g)
}

fn spsa_unchecked<F>(
    loss_fn: &mut F,
    theta: &mut ParameterVector,
    seed: PerturbationSeed,
    epsilon: f64,
) -> Result<(f64, f64, f64), ZoError>
where
    F: FnMut(&ParameterVector) -> f64,
{
    shift(theta, seed, epsilon, 1.0);
    let plus = loss_fn(theta);
    shift(theta, seed, epsilon, -2.0);
    let minus = loss_fn(theta);
    shift(theta, seed, epsilon, 1.0);
    for l in [plus, minus] {
        if !l.is_finite() {
            return Err(ZoError::NonFiniteLoss(l));
        }
    }
    Ok(((plus - minus) / (2.0 * epsilon), plus, minus))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// `gᵢ` for each direction, in stream order.
    pub projected_gradients: Vec<f64>,
    /// `(ℓ₊, ℓ₋)` for each direction.
    pub losses: Vec<(f64, f64)>,
    pub seeds: Vec<PerturbationSeed>,
}

impl StepReport {
    /// Mean of the `2n` perturbed losses, a cheap training-loss proxy.
    pub fn mean_loss(&self) -> f64 {
        let n = self.losses.len() as f64;
        self.losses.iter().map(|(a, b)| a + b).sum::<f64>() / (2.0 * n)
    }
}

/// One MeZO step: `θ ← θ − (η/n)·Σᵢ gᵢ·zᵢ`, directions applied in ascending `i`.
///
/// On a non-finite loss the step is abandoned and `θ` keeps its pre-step value.
pub fn mezo_step<F>(
    loss_fn: &mut F,
    theta: &mut ParameterVector,
    cfg: &ZoConfig,
    step_index: u64,
) -> Result<StepReport, ZoError>
where
    F: FnMut(&ParameterVector) -> f64,
{
    cfg.validate()?;
    check_grid(theta)?;
    let n = cfg.num_perturbations;
    let mut report = StepReport {
        projected_gradients: Vec::with_capacity(n),
        losses: Vec::with_capacity(n),
        seeds: Vec::with_capacity(n),
    };
    for i in 0..n {
        let seed = PerturbationSeed::for_step(cfg.master_seed, step_index, i as u64);
        let (g, plus, minus) = spsa_unchecked(loss_fn, theta, seed, cfg.epsilon)?;
        report.projected_gradients.push(g);
        report.losses.push((plus, minus));
        report.seeds.push(seed);
    }
    if cfg.learning_rate != 0.0 {
        let scale = cfg.learning_rate / n as f64;
        for (&g, &seed) in report.projected_gradients.iter().zip(&report.seeds) {
            let c = scale * g;
            for (x, z) in theta.values.iter_mut().zip(seed.stream()) {
                *x = snap((*x - c * z).clamp(-PARAM_LIMIT, PARAM_LIMIT));
            }
        }
    }
    Ok(report)
}

/// Plain SGD: `θ ← θ − η·∇ℓ(θ)`. Returns the loss at the pre-step point.
pub fn bp_sgd_step<F>(loss_and_grad_fn: &mut F, theta: &mut ParameterVector, eta: f64) -> Result<f64, ZoError>
where
    F: FnMut(&ParameterVector) -> (f64, Vec<f64>),
{
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(ZoError::BadLearningRate(eta));
    }
    let (loss, grad) = loss_and_grad_fn(theta);
    if !loss.is_finite() {
        return Err(ZoError::NonFiniteLoss(loss));
    }
    if grad.len() != theta.len() {
        return Err(ZoError::GradientLength { got: grad.len(), expected: theta.len() });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(ZoError::NonFiniteGrad { index, value: grad[index] });
    }
    if eta != 0.0 {
        for (x, g) in theta.values.iter_mut().zip(&grad) {
            *x -= eta * g;
        }
    }
    Ok(loss)
}
