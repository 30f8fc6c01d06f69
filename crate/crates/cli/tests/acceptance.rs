//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line; exits nonzero if any fails.

use std::path::Path;

use dlmpc::constraints::{local_norm_lhs, BoxBounds, ConstraintSpec, LocalNorm, NoiseModel};
use dlmpc::dlmpc::DlmpcSolver;
use dlmpc::model::{Partition, SystemModel};
use dlmpc::netsim::{Phase, Topology};
use dlmpc::oracle::{full_masks, polytope_support_dual, polytope_support_primal, robust_violation_check};
use dlmpc::qp::{eq_ls_closed_form, kkt_residuals, solve_qp, QpProblem, DEFAULT_MAX_ITER, DEFAULT_TOL};
use dlmpc::sls::{achievability_residual, closed_loop_map, controller_rollout, DisturbanceSignal, SystemResponse};
use dlmpc_cli::{benchmark, cmd_generate, cmd_run, oracle_gap, simulate, Config, ControllerChoice, Instance, NoiseChoice, SweepParam};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-3;
const NOMINAL_ROBUST_TOL: f64 = 1e-4;
const LEMMA1_TOL: f64 = 1e-8;
const LEMMA2_TOL: f64 = 1e-6;
const CLOSED_FORM_TOL: f64 = 1e-8;
const KKT_TOL: f64 = 1e-8;
const ACHIEVABILITY_TOL: f64 = 1e-6;
const ROLLOUT_TOL: f64 = 1e-8;
const GROWTH_LIMIT: f64 = 2.0;
const SEEDS: u64 = 5;
const STEPS: usize = 20;

type Outcome = Result<String, String>;

fn baseline() -> Config {
    Config {
        eps_p: 1e-5,
        eps_d: 1e-5,
        ..Config::default()
    }
}

fn noise_cases() -> [(NoiseChoice, &'static str); 3] {
    [(NoiseChoice::Zero, "noise-free"), (NoiseChoice::Local, "local inf-bound"), (NoiseChoice::Polytopic, "polytopic box")]
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn oracle_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for (noise, name) in noise_cases() {
        let cfg = Config { noise, ..baseline() };
        let inst = Instance::build(&cfg).map_err(err)?;
        let gap = oracle_gap(&cfg, &inst, ControllerChoice::Dlmpc).map_err(err)?;
        worst = worst.max(gap.objective_rel).max(gap.u0);
        notes.push(format!("{name}: obj {:.1e} u0 {:.1e}", gap.objective_rel, gap.u0));
        if gap.objective_rel > ORACLE_TOL || gap.u0 > ORACLE_TOL {
            return Err(notes.join(", "));
        }
    }
    Ok(format!("{} (worst {worst:.1e} <= {ORACLE_TOL:e})", notes.join(", ")))
}

fn nominal_matches_robust() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let run = |controller| {
            let cfg = Config {
                seed,
                controller,
                steps: STEPS,
                ..baseline()
            };
            let inst = Instance::build(&cfg).map_err(err)?;
            simulate(&cfg, &inst).map_err(err)
        };
        let nominal = run(ControllerChoice::DlmpcNominal)?;
        let robust = run(ControllerChoice::DlmpcRobust)?;
        let gap = nominal.trajectory.max_state_gap(&robust.trajectory);
        worst = worst.max(gap);
        if gap > NOMINAL_ROBUST_TOL {
            return Err(format!("seed {seed}: max state gap {gap:.2e}"));
        }
    }
    Ok(format!("{SEEDS} seeds x {STEPS} steps, max state gap {worst:.1e} <= {NOMINAL_ROBUST_TOL:e}"))
}

fn robust_satisfaction() -> Outcome {
    let mut robust_total = 0;
    let mut nominal_total = 0;
    let mut robust_excursion: f64 = 0.0;
    for seed in 0..SEEDS {
        for controller in [ControllerChoice::DlmpcRobust, ControllerChoice::DlmpcNominal] {
            let cfg = Config {
                seed,
                controller,
                noise: NoiseChoice::Polytopic,
                adversarial: true,
                steps: STEPS,
                ..Config::default()
            };
            let inst = Instance::build(&cfg).map_err(err)?;
            let r = simulate(&cfg, &inst).map_err(err)?;
            if controller == ControllerChoice::DlmpcRobust {
                robust_total += r.violations;
                robust_excursion = robust_excursion.max(r.max_violation);
            } else {
                nominal_total += r.violations;
            }
        }
    }
    let msg = format!(
        "robust violations {robust_total} (max excursion {robust_excursion:.1e}), nominal violations {nominal_total} over {SEEDS} seeds"
    );
    if robust_total == 0 && nominal_total >= 1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_model(rng: &mut ChaCha8Rng, n: usize) -> SystemModel {
    let mut dims = Vec::new();
    let mut left = n;
    while left > 0 {
        let d = rng.random_range(1..=left.min(3));
        dims.push(d);
        left -= d;
    }
    let inputs: Vec<usize> = dims.iter().map(|_| rng.random_range(1..=2)).collect();
    let p: usize = inputs.iter().sum();
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.6..0.6));
    let b = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
    SystemModel::new(a, b, Partition::new(dims, inputs).unwrap()).unwrap()
}

fn random_response(rng: &mut ChaCha8Rng, model: &SystemModel, horizon: usize) -> SystemResponse {
    let masks = full_masks(model, horizon);
    let mut resp = SystemResponse::zeros(model, &masks).unwrap();
    let l = resp.layout;
    for r in 0..l.rows() {
        for c in 0..l.cols() {
            if resp.allows(r, c) {
                resp.set(r, c, rng.random_range(-1.0..1.0)).unwrap();
            }
        }
    }
    resp
}

fn duality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let instances = 24;
    let mut worst1: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(2..=6);
        let horizon = rng.random_range(1..=3usize).min(12 / n);
        let model = random_model(&mut rng, n);
        let bounds = BoxBounds::symmetric(
            DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0)),
            DVector::from_fn(model.n_inputs(), |_, _| rng.random_range(0.5..2.0)),
        );
        let sigma = rng.random_range(0.05..0.5);
        let noise = NoiseModel::LocalNormBound { norm: LocalNorm::Inf, sigma };
        let spec = ConstraintSpec::boxes(&model, horizon, &bounds, noise).map_err(err)?;
        let resp = random_response(&mut rng, &model, horizon);
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let lhs = local_norm_lhs(&resp, &x0, &spec, &model).map_err(err)?;
        let enumerated = robust_violation_check(&resp, &spec, &model, &x0, 1 << 20).map_err(err)?;
        let gap = (lhs - spec.h_vec() - enumerated).amax();
        worst1 = worst1.max(gap);
        if gap > LEMMA1_TOL {
            return Err(format!("dual-norm bound differs from enumeration by {gap:.2e}"));
        }
    }
    let mut worst2: f64 = 0.0;
    for _ in 0..instances {
        let m = rng.random_range(1..=4);
        let cuts = rng.random_range(0..=3);
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for j in 0..m {
            for s in [1.0, -1.0] {
                let mut row = vec![0.0; m];
                row[j] = s;
                rows.push(row);
                rhs.push(rng.random_range(0.2..1.5));
            }
        }
        for _ in 0..cuts {
            rows.push((0..m).map(|_| rng.random_range(-1.0..1.0)).collect());
            rhs.push(rng.random_range(0.1..1.0));
        }
        let g_mat = DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]);
        let g_vec = DVector::from_vec(rhs);
        let c = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let primal = polytope_support_primal(&g_mat, &g_vec, &c).map_err(err)?;
        let (dual, _) = polytope_support_dual(&g_mat, &g_vec, &c).map_err(err)?;
        let gap = (primal - dual).abs();
        worst2 = worst2.max(gap);
        if gap > LEMMA2_TOL {
            return Err(format!("dual LP {dual} vs primal {primal}"));
        }
    }
    Ok(format!(
        "{instances} norm-ball instances (worst {worst1:.1e} <= {LEMMA1_TOL:e}), {instances} polytope LPs (worst {worst2:.1e} <= {LEMMA2_TOL:e})"
    ))
}

fn closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_z: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    for _ in 0..100 {
        let nz = rng.random_range(1..=8);
        let rows = rng.random_range(nz..=nz + 4);
        let neq = rng.random_range(0..nz);
        let m = DMatrix::from_fn(rows, nz, |_, _| rng.random_range(-1.0..1.0));
        let v = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
        let p = DMatrix::from_fn(neq, nz, |_, _| rng.random_range(-1.0..1.0));
        let q = DVector::from_fn(neq, |_, _| rng.random_range(-1.0..1.0));
        let cf = eq_ls_closed_form(&m, &v, &p, &q).map_err(err)?.into_optimal().map_err(err)?;
        let problem = QpProblem::new(m.transpose() * &m, -(m.transpose() * &v)).with_eq(p, q);
        let qp = solve_qp(&problem, DEFAULT_TOL, DEFAULT_MAX_ITER).map_err(err)?;
        let dz = (&cf.z - &qp.z).amax();
        let kkt = kkt_residuals(&problem, &cf).max();
        worst_z = worst_z.max(dz);
        worst_kkt = worst_kkt.max(kkt);
        if dz > CLOSED_FORM_TOL || kkt > KKT_TOL {
            return Err(format!("z gap {dz:.2e}, KKT residual {kkt:.2e}"));
        }
    }
    Ok(format!("100 instances, z gap {worst_z:.1e} <= {CLOSED_FORM_TOL:e}, KKT {worst_kkt:.1e} <= {KKT_TOL:e}"))
}

fn locality_and_achievability() -> (Outcome, Outcome) {
    let mut mask_notes = Vec::new();
    let mut worst_res: f64 = 0.0;
    let mut worst_roll: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut messages = 0u64;
    for (noise, name) in noise_cases() {
        let cfg = Config { noise, ..baseline() };
        let inst = match Instance::build(&cfg) {
            Ok(i) => i,
            Err(e) => return (Err(e.to_string()), Err(e.to_string())),
        };
        let spec = inst.controller_spec(ControllerChoice::Dlmpc).unwrap();
        let sol = match DlmpcSolver::new(&inst.model, &spec, &inst.cost, &inst.masks, cfg.admm()).and_then(|mut s| s.solve(&inst.x0)) {
            Ok(s) => s,
            Err(e) => return (Err(e.to_string()), Err(e.to_string())),
        };
        let resp = &sol.response;
        let l = resp.layout;
        let mut outside = 0;
        for c in 0..l.cols() {
            for r in 0..l.x_rows() {
                if !inst.masks.phi_x.allows(r, c) && resp.phi_x.get(r, c) != 0.0 {
                    outside += 1;
                }
            }
            for r in 0..l.u_rows() {
                if !inst.masks.phi_u.allows(r, c) && resp.phi_u.get(r, c) != 0.0 {
                    outside += 1;
                }
            }
        }
        let comm = &sol.stats.comm;
        let limit = cfg.d + 1;
        let hops_ok = Phase::ALL.iter().all(|&ph| comm.messages(ph) > 0 && comm.max_hops(ph) <= limit);
        messages += Phase::ALL.iter().map(|&ph| comm.messages(ph)).sum::<u64>();
        if outside > 0 || !hops_ok {
            let e = format!("{name}: {outside} entries outside the masks, hop limit respected: {hops_ok}");
            return (Err(e), Ok(String::new()));
        }
        mask_notes.push(name);

        let res = achievability_residual(resp, &inst.model).unwrap().norm();
        worst_res = worst_res.max(res);
        for _ in 0..10 {
            let deltas: Vec<DVector<f64>> = (0..l.horizon).map(|_| DVector::from_fn(l.n, |_, _| rng.random_range(-0.1..0.1))).collect();
            let w = DisturbanceSignal {
                x0: inst.x0.clone(),
                deltas: deltas.clone(),
            };
            let (xm, um) = closed_loop_map(resp, &w.stacked()).unwrap();
            let (xr, ur) = controller_rollout(resp, &inst.model, &inst.x0, &deltas).unwrap();
            worst_roll = worst_roll.max((xm - xr).amax()).max((um - ur).amax());
        }
    }
    // A message beyond the allowed radius must be refused.
    let cfg = baseline();
    let inst = Instance::build(&cfg).unwrap();
    let topo = Topology::new(inst.model.graph(), cfg.d + 1);
    let far = (0..inst.model.n_subsystems()).find_map(|j| topo.check(Phase::StateShare, 0, j).err().map(|_| j));
    let refusal = far.is_some();
    let loc = if refusal {
        Ok(format!(
            "masks exact for {}; {messages} messages within {} hops; out-of-range send refused",
            mask_notes.join(", "),
            cfg.d + 1
        ))
    } else {
        Err("no out-of-range pair to probe".into())
    };
    let ach = if worst_res <= ACHIEVABILITY_TOL && worst_roll <= ROLLOUT_TOL {
        Ok(format!(
            "||Z_AB Phi - I||_F {worst_res:.1e} <= {ACHIEVABILITY_TOL:e}, rollout gap {worst_roll:.1e} <= {ROLLOUT_TOL:e} (10 draws x 3 cases)"
        ))
    } else {
        Err(format!("residual {worst_res:.2e}, rollout gap {worst_roll:.2e}"))
    };
    (loc, ach)
}

fn scaling() -> Outcome {
    let sweep = |param, values: Vec<usize>, rows| {
        let cfg = Config {
            sweep: param,
            values,
            rows,
            cols: rows,
            seeds: SEEDS,
            repeats: 3,
            ..Config::default()
        };
        benchmark(&cfg).map_err(err)
    };
    let n = sweep(SweepParam::N, vec![16, 36, 64, 121], 4)?;
    // Locality radii up to 4 only separate on a mesh wider than 2*4 hops.
    let d = sweep(SweepParam::D, vec![1, 2, 3, 4], 8)?;
    let t = sweep(SweepParam::T, vec![3, 5, 8], 4)?;
    let means = |rows: &[dlmpc_cli::BenchRow]| rows.iter().map(|r| r.mean_runtime).collect::<Vec<_>>();
    let (mn, md, mt) = (means(&n), means(&d), means(&t));
    let growth = mn.last().unwrap() / mn[0];
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(" ");
    let msg = format!(
        "N growth {growth:.2}x < {GROWTH_LIMIT} [{}]; d [{}]; T [{}]",
        fmt(&mn),
        fmt(&md),
        fmt(&mt)
    );
    if growth < GROWTH_LIMIT && increasing(&md) && increasing(&mt) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn files_equal(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for name in names {
        let x = std::fs::read(a.join(name)).map_err(err)?;
        let y = std::fs::read(b.join(name)).map_err(err)?;
        if x != y {
            return Err(format!("{name} differs"));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let mut sink = Vec::new();
    let cfg = Config {
        noise: NoiseChoice::Polytopic,
        controller: ControllerChoice::Both,
        ..Config::default()
    };
    cmd_generate(&cfg, &root.join("g1"), &mut sink).map_err(err)?;
    cmd_generate(&cfg, &root.join("g2"), &mut sink).map_err(err)?;
    files_equal(&root.join("g1"), &root.join("g2"), &[dlmpc_cli::MODEL_FILE, dlmpc_cli::SPEC_FILE, dlmpc_cli::X0_FILE])?;
    let outputs = [dlmpc_cli::TRAJECTORY_FILE, dlmpc_cli::TELEMETRY_FILE, dlmpc_cli::COMPARISON_FILE];
    let runs = [("r1", 1), ("r2", 1), ("r4", 4)];
    for (dir, workers) in runs {
        let c = Config { workers, ..cfg.clone() };
        cmd_run(&c, Some(&root.join("g1")), &root.join(dir), &mut sink).map_err(err)?;
    }
    files_equal(&root.join("r1"), &root.join("r2"), &outputs)?;
    files_equal(&root.join("r1"), &root.join("r4"), &outputs)?;
    Ok("instance files and run CSVs byte-identical across repeats and 1 vs 4 workers".into())
}

fn main() {
    let achievability = std::rc::Rc::new(std::cell::RefCell::new(None));
    let store = achievability.clone();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("1 oracle equivalence", Box::new(oracle_equivalence)),
        ("2 nominal equals robust without noise", Box::new(nominal_matches_robust)),
        ("3 robust constraint satisfaction", Box::new(robust_satisfaction)),
        ("4 duality tightness", Box::new(duality)),
        ("5 closed-form correctness", Box::new(closed_form)),
        (
            "6 locality",
            Box::new(move || {
                let (loc, ach) = locality_and_achievability();
                *store.borrow_mut() = Some(ach);
                loc
            }),
        ),
        (
            "7 achievability and rollout identity",
            Box::new(move || achievability.borrow_mut().take().unwrap_or_else(|| Err("not evaluated".into()))),
        ),
        ("8 scaling trend", Box::new(scaling)),
        ("9 determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = std::time::Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS criterion {name}: {msg} [{secs:.1} s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
