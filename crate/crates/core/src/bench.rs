//! Matched-budget fine-tuning runs: BP on a smaller model against MeZO on a larger
//! one, both sized to fit the same analytic memory budget.
//!
//! Both models are first pretrained with BP on a base task (the fine-tuning setting
//! presumes a pretrained model), then fine-tuned on the target task once per learning
//! rate in each method's grid. Every run is deterministic given the plan; only the
//! timing fields vary between invocations.

use crate::memory::{bp_memory, mezo_memory, param_elements, ConfigError, ModelConfig, ParamCount};
use crate::noise::mix;
use crate::toy::{accuracy, Batch, ToyError, ToyModel, ToyTask};
use crate::zo::{bp_sgd_step, mezo_step, ParameterVector, ZoConfig, ZoError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Instant;
use thiserror::Error;

/// Largest allowed gap between the two analytic totals, relative to the larger one.
pub const MATCH_TOLERANCE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Bp,
    Mezo,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bp => "BP",
            Method::Mezo => "MEZO",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "BP" => Some(Method::Bp),
            "MEZO" => Some(Method::Mezo),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// BP pretraining applied to both models before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pretraining {
    pub task: ToyTask,
    pub steps: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub budget_bytes: f64,
    pub bp_model: ModelConfig,
    pub mezo_model: ModelConfig,
    pub task: ToyTask,
    pub pretrain: Option<Pretraining>,
    pub steps: usize,
    pub eval_every: usize,
    /// Held-out examples per evaluation.
    pub eval_examples: usize,
    pub lr_grid_bp: Vec<f64>,
    pub lr_grid_mezo: Vec<f64>,
    /// `learning_rate` is ignored; the grid supplies it.
    pub zo: ZoConfig,
    pub run_seed: u64,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{which} model: {source}")]
    Config {
        which: &'static str,
        #[source]
        source: ConfigError,
    },
    #[error("{which} model needs {needed} bytes, over the {budget} byte budget")]
    OverBudget { which: &'static str, needed: f64, budget: f64 },
    #[error("analytic totals {bp} (BP) and {mezo} (MeZO) differ by more than {:.0}%", MATCH_TOLERANCE * 100.0)]
    Unmatched { bp: f64, mezo: f64 },
    #[error("MeZO model has {mezo} parameters, not more than the BP model's {bp}")]
    NotLarger { bp: u64, mezo: u64 },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Zo(#[from] ZoError),
}

/// One evaluation of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub wall_clock_s: f64,
    /// Mean training loss over the steps since the previous point (the initial batch
    /// loss at step 0).
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub running_max_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub learning_rate: f64,
    pub points: Vec<EvalPoint>,
    /// Thread CPU seconds spent on this run, where the platform reports it.
    pub cpu_seconds: Option<f64>,
    /// Why the run stopped early, if it did.
    pub failed: Option<String>,
}

impl RunRecord {
    pub fn final_running_max(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.running_max_accuracy)
    }

    /// First evaluated step whose running-max accuracy reaches `fraction` of the final one.
    pub fn steps_to_fraction(&self, fraction: f64) -> Option<usize> {
        let target = fraction * self.final_running_max();
        self.points.iter().find(|p| p.running_max_accuracy >= target).map(|p| p.step)
    }
}

impl ExperimentPlan {
    /// Checks the matched-budget conditions against the analytic memory model.
    pub fn validate(&self) -> Result<(), BenchError> {
        let bp = bp_memory(&self.bp_model, false).map_err(|source| BenchError::Config { which: "bp", source })?;
        let mezo = mezo_memory(&self.mezo_model).map_err(|source| BenchError::Config { which: "mezo", source })?;
        for (which, m) in [("bp", bp.total_bytes), ("mezo", mezo.total_bytes)] {
            if m > self.budget_bytes {
                return Err(BenchError::OverBudget { which, needed: m, budget: self.budget_bytes });
            }
        }
        let count = |c: &ModelConfig| param_elements(c, ParamCount::Generic);
        let (bp_params, mezo_params) = (count(&self.bp_model).unwrap(), count(&self.mezo_model).unwrap());
        if mezo_params <= bp_params {
            return Err(BenchError::NotLarger { bp: bp_params, mezo: mezo_params });
        }
        let (hi, lo) = (bp.total_bytes.max(mezo.total_bytes), bp.total_bytes.min(mezo.total_bytes));
        if hi - lo > MATCH_TOLERANCE * hi {
            return Err(BenchError::Unmatched { bp: bp.total_bytes, mezo: mezo.total_bytes });
        }
        if self.eval_every == 0 || self.eval_examples == 0 {
            return Err(BenchError::Plan("eval_every and eval_examples must be positive".into()));
        }
        if self.lr_grid_bp.is_empty() || self.lr_grid_mezo.is_empty() {
            return Err(BenchError::Plan("learning-rate grids must not be empty".into()));
        }
        self.zo.validate()?;
        let mut tasks = vec![self.task];
        tasks.extend(self.pretrain.map(|p| p.task));
        for task in tasks {
            task.validate()?;
            for m in [&self.bp_model, &self.mezo_model] {
                if task.vocab_size != m.vocab_size || task.seq_len > m.context_length {
                    return Err(BenchError::Plan(format!(
                        "task (V={}, N={}) does not fit a model with V={}, N={}",
                        task.vocab_size, task.seq_len, m.vocab_size, m.context_length
                    )));
                }
            }
        }
        Ok(())
    }
}

fn thread_cpu_seconds() -> Option<f64> {
    #[cfg(unix)]
    {
        let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
        // SAFETY: `ts` is a valid out-pointer for the duration of the call.
        let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
        (rc == 0).then(|| ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9)
    }
    #[cfg(not(unix))]
    {
        None
    }
}

fn loss_and_grad(model: &ToyModel, batch: &Batch, p: &ParameterVector) -> (f64, Vec<f64>) {
    match model.backward(p, &batch.tokens, &batch.targets, batch.batch) {
        Ok(g) => (g.loss, g.grad.values().to_vec()),
        Err(_) => (f64::NAN, Vec::new()),
    }
}

/// Trains `params` on `task` with Adam (β₁ 0.9, β₂ 0.999) for `steps` steps and
/// returns the last batch loss. Pretraining only has to reach each model's capacity
/// quickly; the compared fine-tuning runs use plain SGD and MeZO.
pub fn pretrain(model: &ToyModel, params: &mut ParameterVector, spec: &Pretraining) -> Result<f64, BenchError> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    let b = model.config().batch_size;
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut last = f64::NAN;
    for step in 0..spec.steps {
        let batch = spec.task.train_batch((step * b) as u64, b);
        let g = model.backward(params, &batch.tokens, &batch.targets, batch.batch)?;
        if !g.loss.is_finite() {
            return Err(ZoError::NonFiniteLoss(g.loss).into());
        }
        last = g.loss;
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
        for (((x, &gi), mi), vi) in params.values_mut().iter_mut().zip(g.grad.values()).zip(&mut m).zip(&mut v) {
            *mi = B1 * *mi + (1.0 - B1) * gi;
            *vi = B2 * *vi + (1.0 - B2) * gi * gi;
            *x -= spec.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + 1e-8);
        }
    }
    Ok(last)
}

pub fn evaluate(model: &ToyModel, params: &ParameterVector, task: &ToyTask, examples: usize) -> Result<f64, ToyError> {
    let batch = task.eval_batch(0, examples);
    let logits = model.logits(params, &batch.tokens, batch.batch)?;
    Ok(accuracy(&logits, &batch.targets, task.candidates()))
}

struct RunSpec<'a> {
    method: Method,
    learning_rate: f64,
    model: &'a ToyModel,
    start: &'a ParameterVector,
}

fn run_one(plan: &ExperimentPlan, spec: &RunSpec<'_>) -> RunRecord {
    let model = spec.model;
    let b = model.config().batch_size;
    let mut params = spec.start.clone();
    if spec.method == Method::Mezo {
        params.snap_to_grid();
    }
    let zo = ZoConfig { learning_rate: spec.learning_rate, master_seed: mix(plan.run_seed ^ plan.zo.master_seed), ..plan.zo };
    let mut record = RunRecord {
        method: spec.method,
        learning_rate: spec.learning_rate,
        points: Vec::new(),
        cpu_seconds: None,
        failed: None,
    };
    let cpu0 = thread_cpu_seconds();
    let clock = Instant::now();
    let mut running_max: f64 = 0.0;
    let mut push_point = |record: &mut RunRecord, step: usize, train_loss: f64, params: &ParameterVector| {
        match evaluate(model, params, &plan.task, plan.eval_examples) {
            Ok(acc) => {
                running_max = running_max.max(acc);
                record.points.push(EvalPoint {
                    step,
                    wall_clock_s: clock.elapsed().as_secs_f64(),
                    train_loss,
                    eval_accuracy: acc,
                    running_max_accuracy: running_max,
                });
                true
            }
            Err(e) => {
                record.failed = Some(e.to_string());
                false
            }
        }
    };

    let first = plan.task.train_batch(0, b);
    let initial = model.loss(&params, &first.tokens, &first.targets, first.batch).unwrap_or(f64::NAN);
    if push_point(&mut record, 0, initial, &params) {
        let mut loss_sum = 0.0;
        let mut since = 0usize;
        for step in 0..plan.steps {
            let batch = plan.task.train_batch((step * b) as u64, b);
            let loss = match spec.method {
                Method::Bp => bp_sgd_step(
                    &mut |p: &ParameterVector| loss_and_grad(model, &batch, p),
                    &mut params,
                    spec.learning_rate,
                ),
                Method::Mezo => {
                    let mut f = |p: &ParameterVector| {
                        model.loss(p, &batch.tokens, &batch.targets, batch.batch).unwrap_or(f64::NAN)
                    };
                    mezo_step(&mut f, &mut params, &zo, step as u64).map(|r| r.mean_loss())
                }
            };
            match loss {
                Ok(l) => {
                    loss_sum += l;
                    since += 1;
                }
                Err(e) => {
                    record.failed = Some(format!("step {step}: {e}"));
                    break;
                }
            }
            let done = step + 1;
            if done % plan.eval_every == 0 || done == plan.steps {
                if !push_point(&mut record, done, loss_sum / since as f64, &params) {
                    break;
                }
                loss_sum = 0.0;
                since = 0;
            }
        }
    }
    record.cpu_seconds = match (cpu0, thread_cpu_seconds()) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    record
}

/// Redraws the output-head rows of the task's answer words from the model's init
/// distribution, so fine-tuning starts with a fresh readout on pretrained features.
fn fresh_answer_rows(model: &ToyModel, params: &mut ParameterVector, task: &ToyTask, seed: u64) {
    let d = model.config().hidden_dim;
    let fresh = model.init_params(seed);
    let fresh = fresh.segment("lm_head").expect("toy layout has an lm_head");
    let head = params.segment_mut("lm_head").expect("toy layout has an lm_head");
    for &t in task.candidates().unwrap_or(&[]) {
        head[t * d..(t + 1) * d].copy_from_slice(&fresh[t * d..(t + 1) * d]);
    }
}

/// Pretrained starting points for the BP and MeZO models.
pub fn pretrained_models(plan: &ExperimentPlan) -> Result<[(ToyModel, ParameterVector); 2], BenchError> {
    let mut out = Vec::with_capacity(2);
    for (salt, cfg) in [(1u64, plan.bp_model), (2, plan.mezo_model)] {
        let model = ToyModel::new(cfg)?;
        let mut params = model.init_params(mix(plan.run_seed ^ salt));
        if let Some(spec) = &plan.pretrain {
            pretrain(&model, &mut params, spec)?;
            fresh_answer_rows(&model, &mut params, &plan.task, mix(plan.run_seed ^ salt ^ 0x10));
        }
        out.push((model, params));
    }
    let mezo = out.pop().unwrap();
    let bp = out.pop().unwrap();
    Ok([bp, mezo])
}

/// Runs every (method, learning rate) pair of the plan, concurrently. Records come
/// back sorted by method then learning rate.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<Vec<RunRecord>, BenchError> {
    plan.validate()?;
    let [(bp_model, bp_start), (mezo_model, mezo_start)] = pretrained_models(plan)?;
    let mut specs = Vec::new();
    for &lr in &plan.lr_grid_bp {
        specs.push(RunSpec { method: Method::Bp, learning_rate: lr, model: &bp_model, start: &bp_start });
    }
    for &lr in &plan.lr_grid_mezo {
        specs.push(RunSpec { method: Method::Mezo, learning_rate: lr, model: &mezo_model, start: &mezo_start });
    }
    let mut records: Vec<RunRecord> = std::thread::scope(|s| {
        let handles: Vec<_> = specs.iter().map(|spec| s.spawn(move || run_one(plan, spec))).collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    records.sort_by(|a, b| a.method.cmp(&b.method).then(a.learning_rate.total_cmp(&b.learning_rate)));
    Ok(records)
}

/// Best run of `method` by final running-max accuracy; ties go to the smaller rate.
pub fn best_run(records: &[RunRecord], method: Method) -> Option<&RunRecord> {
    records
        .iter()
        .filter(|r| r.method == method && !r.points.is_empty())
        .fold(None, |best: Option<&RunRecord>, r| match best {
            Some(b) if b.final_running_max() >= r.final_running_max() => Some(b),
            _ => Some(r),
        })
}

pub const CSV_COLUMNS: [&str; 7] =
    ["method", "learning_rate", "step", "wall_clock_s", "train_loss", "eval_accuracy", "running_max_accuracy"];

/// One header row, then one row per evaluation point sorted by (method, learning
/// rate, step). Numbers use Rust's shortest round-trip decimal form.
pub fn emit_csv(records: &[RunRecord]) -> String {
    let mut rows: Vec<(Method, f64, &EvalPoint)> =
        records.iter().flat_map(|r| r.points.iter().map(move |p| (r.method, r.learning_rate, p))).collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.step.cmp(&b.2.step)));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for (method, lr, p) in rows {
        w.write_record([
            method.as_str().to_string(),
            lr.to_string(),
            p.step.to_string(),
            p.wall_clock_s.to_string(),
            p.train_loss.to_string(),
            p.eval_accuracy.to_string(),
            p.running_max_accuracy.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("unexpected header {0:?}")]
    Header(Vec<String>),
    #[error("line {line}: bad {column} value {value:?}")]
    Value { line: usize, column: &'static str, value: String },
}

/// Inverse of [`emit_csv`]: groups rows back into records (without CPU time or
/// failure notes, which the CSV does not carry).
pub fn parse_csv(text: &str) -> Result<Vec<RunRecord>, CsvError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(CsvError::Header(header));
    }
    let mut records: Vec<RunRecord> = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let num = |idx: usize| -> Result<f64, CsvError> {
            row[idx].parse().map_err(|_| CsvError::Value { line, column: CSV_COLUMNS[idx], value: row[idx].to_string() })
        };
        let method = Method::parse(&row[0])
            .ok_or_else(|| CsvError::Value { line, column: "method", value: row[0].to_string() })?;
        let lr = num(1)?;
        let step = row[2]
            .parse()
            .map_err(|_| CsvError::Value { line, column: "step", value: row[2].to_string() })?;
        let point = EvalPoint {
            step,
            wall_clock_s: num(3)?,
            train_loss: num(4)?,
            eval_accuracy: num(5)?,
            running_max_accuracy: num(6)?,
        };
        match records.last_mut() {
            Some(rec) if rec.method == method && rec.learning_rate.to_bits() == lr.to_bits() => rec.points.push(point),
            _ => records.push(RunRecord { method, learning_rate: lr, points: vec![point], cpu_seconds: None, failed: None }),
        }
    }
    Ok(records)
}
