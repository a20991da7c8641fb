//! `mezo-budget`: memory plans, sweeps and budget solving for BP vs. MeZO
//! fine-tuning, plus desk-scale training runs and estimator self-checks.
//!
//! Exit codes: 0 success, 1 verification failure, 2 invalid input, 3 infeasible.

use clap::{Args, Parser, Subcommand, ValueEnum};
use mezo_budget::bench::{self, best_run, emit_csv, ExperimentPlan, Method, RunRecord};
use mezo_budget::config::{parse_bytes, ConfigFile, ConfigFileError, ModelSection};
use mezo_budget::memory::{
    human_bytes, max_dimension, memory, param_elements, sweep, sweep_csv, FreeAxis, MemoryBreakdown, MemoryMode,
    ModelConfig, ParamCount, SolveError, SweepAxis, SweepSpec,
};
use mezo_budget::verify::{self, VerifyConfig, VerifyError};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mezo-budget", version, about = "Memory budgets for backprop vs. MeZO fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Itemized training memory for one config.
    Plan {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "bp")]
        mode: Mode,
        /// Machine-readable output.
        #[arg(long, conflicts_with = "table")]
        json: bool,
        /// Aligned text table (the default).
        #[arg(long)]
        table: bool,
    },
    /// BP and MeZO totals along one axis, as CSV.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value_t = 16)]
        points: usize,
        /// Checkpoint BP activations (√L layers kept).
        #[arg(long)]
        ckpt: bool,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Largest hidden size or depth that fits a budget.
    Solve {
        #[command(flatten)]
        model: ModelArgs,
        /// Bytes; accepts GB (10^9) and GiB (2^30) suffixes.
        #[arg(long)]
        budget: String,
        #[arg(long, value_enum)]
        axis: FreeAxisArg,
        #[arg(long, value_enum, default_value = "mezo")]
        mode: Mode,
        #[arg(long)]
        json: bool,
    },
    /// Run a matched-budget BP vs. MeZO plan and write CSVs plus a summary.
    Train {
        /// Plan file.
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the SPSA estimator and the toy model's gradients.
    Verify {
        /// Flat parameter count for the restoration check (unbiasedness uses at most 8).
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Config file with a [model] section.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// llama2-7b or gpt2-medium.
    #[arg(long)]
    preset: Option<String>,
    /// Override a model key, e.g. --set stored_layers=2. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Bp,
    BpCkpt,
    Mezo,
}

impl From<Mode> for MemoryMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Bp => MemoryMode::Bp,
            Mode::BpCkpt => MemoryMode::BpCheckpointed,
            Mode::Mezo => MemoryMode::Mezo,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    N,
    L,
    D,
}

#[derive(Clone, Copy, ValueEnum)]
enum FreeAxisArg {
    D,
    L,
}

enum Failure {
    Verify(String),
    Invalid(String),
    Infeasible(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Infeasible(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Verify(m) | Failure::Invalid(m) | Failure::Infeasible(m) => m,
        }
    }
}

impl From<ConfigFileError> for Failure {
    fn from(e: ConfigFileError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan { model, mode, json, .. } => cmd_plan(&model, mode.into(), json),
        Command::Sweep { model, axis, from, to, points, ckpt, out } => {
            cmd_sweep(&model, axis, from, to, points, ckpt, out.as_deref())
        }
        Command::Solve { model, budget, axis, mode, json } => cmd_solve(&model, &budget, axis, mode.into(), json),
        Command::Train { plan, out } => cmd_train(&plan, &out),
        Command::Verify { dim, seed, epsilon } => cmd_verify(dim, seed, epsilon),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn model_config(args: &ModelArgs) -> Result<ModelConfig, Failure> {
    let file = match &args.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let mut flags = ModelSection { preset: args.preset.clone(), ..ModelSection::default() };
    for set in &args.sets {
        let (key, value) = set.split_once('=').ok_or_else(|| invalid(format!("--set {set:?}: expected KEY=VALUE")))?;
        let parsed = ConfigFile::parse(&format!("[model]\n{} = {}\n", key.trim(), value.trim()))
            .map_err(|e| invalid(format!("--set {set:?}: {e}")))?;
        flags = flags.layered(&parsed.model.unwrap_or_default());
    }
    let section = file.model.unwrap_or_default().layered(&flags);
    Ok(section.resolve("model")?)
}

fn breakdown_table(b: &MemoryBreakdown) -> String {
    let mut out = format!("mode: {}\n", b.mode);
    for (name, v) in [
        ("weights", b.weights_bytes),
        ("gradients", b.gradients_bytes),
        ("embedding+head", b.embedding_head_bytes),
        ("activations", b.activations_bytes),
        ("total", b.total_bytes),
    ] {
        let _ = writeln!(out, "{name:<15} {v:>22} B  {}", human_bytes(v));
    }
    out
}

fn cmd_plan(args: &ModelArgs, mode: MemoryMode, json: bool) -> Result<String, Failure> {
    let cfg = model_config(args)?;
    let b = memory(&cfg, mode).map_err(invalid)?;
    if json {
        Ok(serde_json::to_string_pretty(&b).expect("plain struct serializes") + "\n")
    } else {
        Ok(breakdown_table(&b))
    }
}

fn cmd_sweep(
    args: &ModelArgs,
    axis: Axis,
    from: usize,
    to: usize,
    points: usize,
    ckpt: bool,
    out: Option<&Path>,
) -> Result<String, Failure> {
    let base = model_config(args)?;
    if from == 0 || from >= to {
        return Err(invalid(format!("--from must be positive and below --to (got {from}..{to})")));
    }
    if points < 2 {
        return Err(invalid(format!("--points must be at least 2 (got {points})")));
    }
    let axis = match axis {
        Axis::N => SweepAxis::ContextLength,
        Axis::L => SweepAxis::Layers,
        Axis::D => SweepAxis::HiddenDim,
    };
    let spec = SweepSpec { axis, values: axis.spaced(from, to, points), base };
    let rows = sweep(&spec, ckpt).map_err(invalid)?;
    let csv = sweep_csv(&rows);
    match out {
        Some(path) => {
            fs::write(path, &csv).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            Ok(String::new())
        }
        None => Ok(csv),
    }
}

fn cmd_solve(args: &ModelArgs, budget: &str, axis: FreeAxisArg, mode: MemoryMode, json: bool) -> Result<String, Failure> {
    let cfg = model_config(args)?;
    let budget = parse_bytes(budget).map_err(|e| invalid(format!("--budget: {e}")))?;
    let axis = match axis {
        FreeAxisArg::D => FreeAxis::HiddenDim,
        FreeAxisArg::L => FreeAxis::Layers,
    };
    let sol = max_dimension(budget, &cfg, axis, mode).map_err(|e| match e {
        SolveError::Infeasible { .. } => Failure::Infeasible(format!("INFEASIBLE: {e}")),
        _ => invalid(e),
    })?;
    let params = param_elements(&sol.config, ParamCount::Generic).map_err(invalid)?;
    if json {
        let v = serde_json::json!({
            "axis": axis.name(),
            "value": sol.value,
            "budget_bytes": budget,
            "parameters": params,
            "breakdown": sol.breakdown,
        });
        return Ok(serde_json::to_string_pretty(&v).expect("json value serializes") + "\n");
    }
    let mut out = format!("{} = {}\nbudget: {} B  {}\nparameters: {params}\n", axis.name(), sol.value, budget, human_bytes(budget));
    out.push_str(&breakdown_table(&sol.breakdown));
    Ok(out)
}

fn summary(plan: &ExperimentPlan, records: &[RunRecord]) -> String {
    let mut out = String::new();
    let bp = memory(&plan.bp_model, MemoryMode::Bp).expect("plan validated");
    let mezo = memory(&plan.mezo_model, MemoryMode::Mezo).expect("plan validated");
    let count = |c| param_elements(c, ParamCount::Generic).expect("plan validated");
    let _ = writeln!(out, "budget {} B  {}", plan.budget_bytes, human_bytes(plan.budget_bytes));
    let _ = writeln!(out, "BP   model: {} parameters, {} B under BP", count(&plan.bp_model), bp.total_bytes);
    let _ = writeln!(out, "MEZO model: {} parameters, {} B under MeZO", count(&plan.mezo_model), mezo.total_bytes);
    let _ = writeln!(out, "steps {}, eval every {}", plan.steps, plan.eval_every);
    for method in [Method::Bp, Method::Mezo] {
        match best_run(records, method) {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "best {method}: learning_rate {} final running-max accuracy {} (90% of it by step {})",
                    r.learning_rate,
                    r.final_running_max(),
                    r.steps_to_fraction(0.9).unwrap_or(0)
                );
            }
            None => {
                let _ = writeln!(out, "best {method}: no successful run");
            }
        }
    }
    for r in records {
        let last = r.points.last();
        let _ = write!(
            out,
            "  {} lr {}: final running-max {} after {} steps, {:.2} s wall",
            r.method,
            r.learning_rate,
            r.final_running_max(),
            last.map_or(0, |p| p.step),
            last.map_or(0.0, |p| p.wall_clock_s),
        );
        if let Some(cpu) = r.cpu_seconds {
            let _ = write!(out, ", {cpu:.2} s cpu");
        }
        if let Some(why) = &r.failed {
            let _ = write!(out, ", FAILED: {why}");
        }
        out.push('\n');
    }
    out
}

fn cmd_train(plan_path: &Path, out: &Path) -> Result<String, Failure> {
    let plan = ConfigFile::load(plan_path)?.experiment_plan()?;
    plan.validate().map_err(invalid)?;
    let records = bench::run_experiment(&plan).map_err(invalid)?;
    fs::create_dir_all(out).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
    let text = summary(&plan, &records);
    for (name, body) in [("runs.csv", emit_csv(&records)), ("summary.txt", text.clone())] {
        let path = out.join(name);
        fs::write(&path, body).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    }
    Ok(text)
}

fn cmd_verify(dim: usize, seed: u64, epsilon: f64) -> Result<String, Failure> {
    let cfg = VerifyConfig { dim, seed, epsilon, ..VerifyConfig::default() };
    let checks = verify::run_checks(&cfg).map_err(|e: VerifyError| invalid(format!("precondition: {e}")))?;
    let mut out = String::new();
    for c in &checks {
        let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(out)
    } else {
        print!("{out}");
        Err(Failure::Verify(format!("failed checks: {}", failed.join(", "))))
    }
}
