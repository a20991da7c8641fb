//! Browser bindings. Every export takes plain numbers/strings and returns a JSON
//! string, so the page needs no glue beyond `JSON.parse`.

use mezo_budget::config::{parse_bytes, preset};
use mezo_budget::memory::{
    max_dimension, param_elements, sweep, FreeAxis, MemoryMode, ModelConfig, ParamCount, SweepAxis, SweepSpec,
};
use mezo_budget::verify;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Directions per probe; kept small so the page stays responsive.
pub const PROBE_DIRECTIONS: u64 = 20_000;

fn base(name: &str) -> Result<ModelConfig, String> {
    preset(name).ok_or_else(|| format!("unknown preset {name:?}"))
}

fn mode(name: &str) -> Result<MemoryMode, String> {
    match name {
        "bp" => Ok(MemoryMode::Bp),
        "bp-ckpt" => Ok(MemoryMode::BpCheckpointed),
        "mezo" => Ok(MemoryMode::Mezo),
        _ => Err(format!("unknown mode {name:?}")),
    }
}

/// Ratio curve along `n`, `l` or `d`: `{"axis", "points": [{axis_value, m_bp, m_mezo, ratio}]}`.
pub fn ratio_curve(preset_name: &str, axis: &str, from: u32, to: u32, points: u32, ckpt: bool) -> Result<String, String> {
    let axis = match axis {
        "n" => SweepAxis::ContextLength,
        "l" => SweepAxis::Layers,
        "d" => SweepAxis::HiddenDim,
        _ => return Err(format!("unknown axis {axis:?}")),
    };
    if from == 0 || from >= to || points < 2 {
        return Err("need 0 < from < to and at least 2 points".into());
    }
    let mut values = axis.spaced(from as usize, to as usize, points as usize);
    let b = base(preset_name)?;
    if axis == SweepAxis::HiddenDim {
        // keep D a multiple of H
        let h = b.num_heads;
        values = values.into_iter().map(|v| (v.div_ceil(h)) * h).collect();
        values.dedup();
    }
    let rows = sweep(&SweepSpec { axis, values, base: b }, ckpt).map_err(|e| e.to_string())?;
    Ok(json!({ "axis": axis.name(), "points": rows }).to_string())
}

/// Largest `d` or `l` under `budget` (bytes, or with a GB/GiB suffix).
pub fn solve_budget(preset_name: &str, budget: &str, axis: &str, mode_name: &str) -> Result<String, String> {
    let cfg = base(preset_name)?;
    let budget = parse_bytes(budget)?;
    let axis = match axis {
        "d" => FreeAxis::HiddenDim,
        "l" => FreeAxis::Layers,
        _ => return Err(format!("unknown axis {axis:?}")),
    };
    let mode = mode(mode_name)?;
    let sol = max_dimension(budget, &cfg, axis, mode).map_err(|e| e.to_string())?;
    let params = param_elements(&sol.config, ParamCount::Generic).map_err(|e| e.to_string())?;
    Ok(json!({
        "axis": axis.name(),
        "value": sol.value,
        "budget_bytes": budget,
        "parameters": params,
        "breakdown": sol.breakdown,
    })
    .to_string())
}

/// Perturb/restore and unbiasedness on a random quadratic of `dim` coordinates.
pub fn spsa_probe(dim: u32, seed: u32, epsilon: f64) -> Result<String, String> {
    let dim = dim as usize;
    if dim == 0 || dim > verify::UNBIASED_DIM {
        return Err(format!("dim must be in 1..={}", verify::UNBIASED_DIM));
    }
    let restore = verify::restoration_check(dim, seed as u64, 200, epsilon).map_err(|e| e.to_string())?;
    let err = verify::unbiasedness_error(dim, seed as u64, PROBE_DIRECTIONS, epsilon).map_err(|e| e.to_string())?;
    Ok(json!({
        "restored": restore.passed,
        "restore_detail": restore.detail,
        "directions": PROBE_DIRECTIONS,
        "relative_error": err,
        // sampling error of the mean estimate scales like sqrt((dim + 1) / K)
        "expected_error": (((dim + 1) as f64) / PROBE_DIRECTIONS as f64).sqrt(),
    })
    .to_string())
}

#[wasm_bindgen(js_name = ratioCurve)]
pub fn ratio_curve_js(preset: &str, axis: &str, from: u32, to: u32, points: u32, ckpt: bool) -> Result<String, JsError> {
    ratio_curve(preset, axis, from, to, points, ckpt).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = solveBudget)]
pub fn solve_budget_js(preset: &str, budget: &str, axis: &str, mode: &str) -> Result<String, JsError> {
    solve_budget(preset, budget, axis, mode).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = spsaProbe)]
pub fn spsa_probe_js(dim: u32, seed: u32, epsilon: f64) -> Result<String, JsError> {
    spsa_probe(dim, seed, epsilon).map_err(|e| JsError::new(&e))
}
