//! Experiment harness: instance generation, closed-loop runs, oracle
//! comparison and runtime sweeps for the `dlmpc` binary.

pub mod config;
pub mod scenario;

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dlmpc::constraints::ConstraintSpec;
use dlmpc::dlmpc::{check_localizability, DlmpcController, DlmpcSolver};
use dlmpc::netsim::{run_closed_loop, Controller, NoiseGen, Trajectory};
use dlmpc::oracle::{solve_centralized, OracleController, OracleOptions};
use dlmpc::textfmt::fmt_f64;
use dlmpc::Error;
use nalgebra::DVector;

pub use config::{Config, ControllerChoice, NoiseChoice, SweepParam};
pub use scenario::Instance;

pub const MODEL_FILE: &str = "model.txt";
pub const SPEC_FILE: &str = "spec.txt";
pub const X0_FILE: &str = "x0.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Solver(#[from] Error),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    /// 2 for configuration and file problems, 4 for infeasibility, 3 for
    /// every other solver failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Io { .. } => 2,
            CliError::Solver(e) => match e.root() {
                Error::Infeasible(_) | Error::LocalInfeasible { .. } | Error::NotLocalizable(_) => 4,
                Error::Io(_) | Error::Parse { .. } => 2,
                _ => 3,
            },
            CliError::Check(_) => 3,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn say(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

/// Loads a config file (when given) and applies `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
    let mut cfg = match path {
        Some(p) => Config::parse(&read(p)?)?,
        None => Config::default(),
    };
    for pair in overrides {
        cfg.set_pair(pair)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the instance files into `dir` and prints a summary.
pub fn cmd_generate(cfg: &Config, dir: &Path, out: &mut dyn Write) -> Result<Instance, CliError> {
    let inst = Instance::build(cfg)?;
    write(&dir.join(MODEL_FILE), &inst.model.to_text())?;
    write(&dir.join(SPEC_FILE), &inst.spec.to_text())?;
    write(&dir.join(X0_FILE), &scenario::x0_to_text(&inst.x0))?;
    let g = inst.model.graph();
    say(
        out,
        &format!(
            "N={} n={} p={} edges={}",
            inst.model.n_subsystems(),
            inst.model.n_states(),
            inst.model.n_inputs(),
            g.edges().len()
        ),
    )?;
    Ok(inst)
}

/// Reads instance files written by [`cmd_generate`].
pub fn load_instance(cfg: &Config, dir: &Path) -> Result<Instance, CliError> {
    let model = dlmpc::model::SystemModel::from_text(&read(&dir.join(MODEL_FILE))?)?;
    let spec = dlmpc::constraints::ConstraintSpec::from_text(&read(&dir.join(SPEC_FILE))?, &model)?;
    let x0 = scenario::x0_from_text(&read(&dir.join(X0_FILE))?)?;
    Instance::from_parts(cfg, model, spec, x0)
}

/// Outcome of one closed-loop run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub trajectory: Trajectory,
    pub telemetry: Option<String>,
    /// `(tau, |u0_dlmpc - u0_oracle|_inf, objective_dlmpc, objective_oracle)`.
    pub comparison: Option<Vec<(usize, f64, f64, f64)>>,
    pub violations: usize,
    pub max_violation: f64,
}

impl RunReport {
    pub fn max_u0_gap(&self) -> Option<f64> {
        self.comparison.as_ref().map(|c| c.iter().map(|r| r.1).fold(0.0, f64::max))
    }

    pub fn comparison_csv(&self) -> Option<String> {
        self.comparison.as_ref().map(|rows| {
            let mut s = String::from("tau,u0_gap,objective_dlmpc,objective_oracle\n");
            for (tau, gap, a, b) in rows {
                let _ = writeln!(s, "{tau},{},{},{}", fmt_f64(*gap), fmt_f64(*a), fmt_f64(*b));
            }
            s
        })
    }
}

/// Re-examines an ADMM stall with the centralized solver so an infeasible
/// problem is reported as such rather than as a convergence failure.
fn diagnose(err: Error, inst: &Instance, spec: &ConstraintSpec, x: &DVector<f64>) -> Error {
    if !matches!(err.root(), Error::NotConverged { .. }) {
        return err;
    }
    match solve_centralized(&inst.model, spec, &inst.cost, Some(&inst.masks), x, &OracleOptions::default()) {
        Err(e @ Error::Infeasible(_)) => e,
        _ => err,
    }
}

/// Runs the configured controller in closed loop on `inst`.
pub fn simulate(cfg: &Config, inst: &Instance) -> Result<RunReport, CliError> {
    let mut noise = NoiseGen::new(inst.plant_noise(cfg)?, &inst.model, cfg.seed)?;
    let spec = inst.controller_spec(cfg.controller)?;
    let (trajectory, telemetry, comparison) = match cfg.controller {
        ControllerChoice::Oracle => {
            let mut ctrl = OracleController::new(&inst.model, &spec, &inst.cost, Some(&inst.masks));
            let tr = run_closed_loop(&inst.model, &mut ctrl, &inst.x0, &mut noise, cfg.steps)?;
            (tr, None, None)
        }
        ControllerChoice::Both => {
            let solver = DlmpcSolver::new(&inst.model, &spec, &inst.cost, &inst.masks, cfg.admm())?;
            let mut dl = DlmpcController::new(solver);
            let mut oc = OracleController::new(&inst.model, &spec, &inst.cost, Some(&inst.masks));
            let mut rows = Vec::new();
            let tr = {
                let mut both = |x: &DVector<f64>| -> dlmpc::Result<DVector<f64>> {
                    let u = dl.control(x).map_err(|e| diagnose(e, inst, &spec, x))?;
                    let uo = oc.control(x)?;
                    let tau = rows.len();
                    let obj_d = dl.log.last().map_or(f64::NAN, |l| l.objective);
                    let obj_o = oc.objectives.last().copied().unwrap_or(f64::NAN);
                    rows.push((tau, (&u - uo).amax(), obj_d, obj_o));
                    Ok(u)
                };
                run_closed_loop(&inst.model, &mut both, &inst.x0, &mut noise, cfg.steps)?
            };
            (tr, Some(dl.telemetry_csv()), Some(rows))
        }
        _ => {
            let solver = DlmpcSolver::new(&inst.model, &spec, &inst.cost, &inst.masks, cfg.admm())?;
            let mut dl = DlmpcController::new(solver);
            let tr = {
                let mut ctrl = |x: &DVector<f64>| dl.control(x).map_err(|e| diagnose(e, inst, &spec, x));
                run_closed_loop(&inst.model, &mut ctrl, &inst.x0, &mut noise, cfg.steps)?
            };
            (tr, Some(dl.telemetry_csv()), None)
        }
    };
    Ok(RunReport {
        violations: trajectory.violations(&inst.bounds, cfg.violation_tol),
        max_violation: trajectory.max_violation(&inst.bounds),
        trajectory,
        telemetry,
        comparison,
    })
}

/// Closed-loop run writing trajectory, telemetry and (for `both`)
/// comparison CSVs into `out_dir`.
pub fn cmd_run(cfg: &Config, instance_dir: Option<&Path>, out_dir: &Path, out: &mut dyn Write) -> Result<RunReport, CliError> {
    let inst = match instance_dir {
        Some(dir) => load_instance(cfg, dir)?,
        None => Instance::build(cfg)?,
    };
    let report = simulate(cfg, &inst)?;
    write(&out_dir.join(TRAJECTORY_FILE), &report.trajectory.to_csv(&inst.model))?;
    if let Some(t) = &report.telemetry {
        write(&out_dir.join(TELEMETRY_FILE), t)?;
    }
    if let Some(c) = report.comparison_csv() {
        write(&out_dir.join(COMPARISON_FILE), &c)?;
    }
    say(
        out,
        &format!(
            "steps={} violations={} max_violation={}",
            report.trajectory.steps(),
            report.violations,
            fmt_f64(report.max_violation)
        ),
    )?;
    if let Some(rows) = &report.comparison {
        say(out, "tau,u0_gap")?;
        for (tau, gap, _, _) in rows {
            say(out, &format!("{tau},{}", fmt_f64(*gap)))?;
        }
        say(out, &format!("max_u0_gap={}", fmt_f64(report.max_u0_gap().unwrap_or(0.0))))?;
    }
    Ok(report)
}

/// Distributed versus centralized solution at one state.
#[derive(Debug, Clone, Copy)]
pub struct OracleGap {
    pub objective_rel: f64,
    pub u0: f64,
    pub iterations: usize,
}

pub fn oracle_gap(cfg: &Config, inst: &Instance, controller: ControllerChoice) -> Result<OracleGap, CliError> {
    let spec = inst.controller_spec(controller)?;
    let mut solver = DlmpcSolver::new(&inst.model, &spec, &inst.cost, &inst.masks, cfg.admm())?;
    let dl = solver.solve(&inst.x0).map_err(|e| diagnose(e, inst, &spec, &inst.x0))?;
    let or = solve_centralized(&inst.model, &spec, &inst.cost, Some(&inst.masks), &inst.x0, &OracleOptions::default())?;
    Ok(OracleGap {
        objective_rel: (dl.objective - or.objective).abs() / or.objective.abs().max(f64::MIN_POSITIVE),
        u0: (&dl.u0 - &or.u0).amax(),
        iterations: dl.iterations,
    })
}

/// Localizability plus a one-shot oracle comparison at `x0`.
pub fn cmd_check(cfg: &Config, out: &mut dyn Write) -> Result<OracleGap, CliError> {
    let inst = Instance::build(cfg)?;
    if !check_localizability(&inst.model, &inst.masks, cfg.horizon) {
        return Err(Error::NotLocalizable(format!("d = {}, T = {}", cfg.d, cfg.horizon)).into());
    }
    say(out, &format!("localizable d={} T={}", cfg.d, cfg.horizon))?;
    let gap = oracle_gap(cfg, &inst, cfg.controller)?;
    say(
        out,
        &format!(
            "objective_gap={} u0_gap={} iterations={}",
            fmt_f64(gap.objective_rel),
            fmt_f64(gap.u0),
            gap.iterations
        ),
    )?;
    if gap.objective_rel > 1e-3 || gap.u0 > 1e-3 {
        return Err(CliError::Check(format!(
            "distributed and centralized solutions differ (objective {:e}, u0 {:e})",
            gap.objective_rel, gap.u0
        )));
    }
    Ok(gap)
}

/// One benchmark configuration summarized over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub param: SweepParam,
    pub value: usize,
    pub mean_runtime: f64,
    pub std_runtime: f64,
    pub case: &'static str,
    /// Per-seed runtimes in seed order.
    pub samples: Vec<f64>,
}

pub const BENCH_HEADER: &str = "param,value,mean_runtime,std_runtime,case";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.param, r.value, fmt_f64(r.mean_runtime), fmt_f64(r.std_runtime), r.case);
    }
    s
}

struct BenchCase {
    value: usize,
    solver: DlmpcSolver,
    warm: Option<(Vec<f64>, Vec<f64>)>,
    x1: DVector<f64>,
    model: dlmpc::model::SystemModel,
    best: f64,
}

/// Warm-started per-iteration per-state subsystem runtime for every value of
/// the sweep.
///
/// Each `(value, seed)` instance is solved once at `x0` and stepped to `x1`
/// without noise; the warm-started solve at `x1` is then timed `repeats`
/// times from the same warm state, keeping the fastest. Repeats cycle
/// through all instances so slow drifts in machine load hit every value
/// alike.
pub fn benchmark(cfg: &Config) -> Result<Vec<BenchRow>, CliError> {
    let mut cases = Vec::new();
    for &value in &cfg.values {
        for s in 0..cfg.seeds {
            let mut c = cfg.clone();
            c.seed = cfg.seed + s;
            match cfg.sweep {
                SweepParam::N => {
                    let side = (value as f64).sqrt().round() as usize;
                    c.rows = side;
                    c.cols = side;
                }
                SweepParam::D => c.d = value,
                SweepParam::T => c.horizon = value,
            }
            let inst = Instance::build(&c)?;
            let spec = inst.controller_spec(ControllerChoice::Dlmpc)?;
            let mut solver = DlmpcSolver::new(&inst.model, &spec, &inst.cost, &inst.masks, c.admm())?;
            let first = solver.solve(&inst.x0)?;
            let x1 = inst.model.a() * &inst.x0 + inst.model.b() * &first.u0;
            cases.push(BenchCase {
                value,
                warm: solver.warm_state(),
                solver,
                x1,
                model: inst.model,
                best: f64::INFINITY,
            });
        }
    }
    for _ in 0..cfg.repeats {
        for c in cases.iter_mut() {
            c.solver.set_warm_state(c.warm.clone())?;
            let sol = c.solver.solve(&c.x1)?;
            c.best = c.best.min(sol.stats.per_iteration_per_state(&c.model));
        }
    }
    let case = match cfg.noise {
        NoiseChoice::Zero => "noise_free",
        NoiseChoice::Local => "local",
        NoiseChoice::Polytopic => "polytopic",
    };
    Ok(cfg
        .values
        .iter()
        .map(|&value| {
            let samples: Vec<f64> = cases.iter().filter(|c| c.value == value).map(|c| c.best).collect();
            let m = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / m;
            let var = if samples.len() > 1 {
                samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            BenchRow {
                param: cfg.sweep,
                value,
                mean_runtime: mean,
                std_runtime: var.sqrt(),
                case,
                samples,
            }
        })
        .collect())
}

/// Runs the sweep, writes the CSV to `path` and echoes it.
pub fn cmd_benchmark(cfg: &Config, path: Option<&Path>, out: &mut dyn Write) -> Result<Vec<BenchRow>, CliError> {
    let start = Instant::now();
    let rows = benchmark(cfg)?;
    let csv = bench_csv(&rows);
    if let Some(p) = path {
        write(p, &csv)?;
    }
    for line in csv.lines() {
        say(out, line)?;
    }
    say(out, &format!("# wall time {:.1} s", start.elapsed().as_secs_f64()))?;
    Ok(rows)
}
