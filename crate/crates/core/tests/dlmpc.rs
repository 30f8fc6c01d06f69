use dlmpc::constraints::{BoxBounds, ConstraintSpec, LocalNorm, NoiseModel, Polytope, QuadraticCost};
use dlmpc::dlmpc::{check_localizability, row_update, solve_dlmpc, AdmmConfig, DlmpcSolver};
use dlmpc::model::{d_sets, generate_power_grid, locality_masks, GridParams, LocalityMasks, Partition, SystemModel};
use dlmpc::oracle::{solve_centralized, OracleOptions};
use dlmpc::sls::achievability_residual;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    model: SystemModel,
    spec: ConstraintSpec,
    masks: LocalityMasks,
    x0: DVector<f64>,
}

fn case(rows: usize, cols: usize, seed: u64, d: usize, horizon: usize, noise: impl Fn(&SystemModel) -> NoiseModel) -> Case {
    let model = generate_power_grid(&GridParams {
        rows,
        cols,
        ..GridParams::baseline(seed)
    })
    .unwrap()
    .model;
    let n = model.n_states();
    let x_max = DVector::from_fn(n, |k, _| if k % 2 == 0 { 2.0 } else { 0.8 });
    let bounds = BoxBounds::symmetric(x_max, DVector::from_element(model.n_inputs(), 1.5));
    let spec = ConstraintSpec::boxes(&model, horizon, &bounds, noise(&model)).unwrap();
    let masks = locality_masks(&model, d, horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    Case { model, spec, masks, x0 }
}

fn poly(model: &SystemModel, horizon: usize) -> NoiseModel {
    let n = model.n_states();
    NoiseModel::Polytope(Polytope::local_box(model, horizon, &DVector::from_element(n, -0.1), &DVector::from_element(n, 0.1)).unwrap())
}

fn solver(c: &Case, config: AdmmConfig) -> DlmpcSolver {
    DlmpcSolver::new(&c.model, &c.spec, &QuadraticCost::identity(&c.model), &c.masks, config).unwrap()
}

#[test]
fn baseline_iteration_count_is_stable() {
    let c = case(4, 4, 0, 3, 5, |_| NoiseModel::None);
    let sol = solver(&c, AdmmConfig::default()).solve(&c.x0).unwrap();
    assert_eq!(sol.iterations, 54);
}

#[test]
fn telemetry_bounds_global_consensus() {
    let c = case(4, 4, 1, 3, 5, |_| NoiseModel::None);
    let config = AdmmConfig::default();
    let mut s = solver(&c, config);
    let sol = s.solve(&c.x0).unwrap();
    let &(k, primal, dual) = sol.telemetry.rows.last().unwrap();
    assert_eq!(k + 1, sol.iterations);
    assert!(primal <= config.eps_p && dual <= config.eps_d);
    let n_sub = c.model.n_subsystems() as f64;
    assert!(s.augmented().consensus_residual() <= config.eps_p * n_sub.sqrt());
    let first = sol.telemetry.rows[0].1;
    assert!(primal < first);
}

#[test]
fn infinite_tolerance_stops_after_one_achievable_iterate() {
    for noise in [0, 1, 2] {
        let c = case(2, 3, 2, 1, 3, |m| match noise {
            0 => NoiseModel::None,
            1 => NoiseModel::LocalNormBound {
                norm: LocalNorm::Inf,
                sigma: 0.05,
            },
            _ => poly(m, 3),
        });
        let sol = solver(&c, AdmmConfig::default().with_tolerance(f64::INFINITY)).solve(&c.x0).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(achievability_residual(&sol.response, &c.model).unwrap().amax() <= 1e-8);
        assert!(sol.response.is_causal() && sol.response.respects_masks());
    }
}

#[test]
fn converged_state_is_a_row_update_fixed_point() {
    let c = case(2, 3, 3, 1, 3, |m| poly(m, 3));
    let mut s = solver(&c, AdmmConfig::default().with_tolerance(1e-9));
    s.solve(&c.x0).unwrap();
    let (hpsi, lambda) = s.warm_state().unwrap();
    for slice in s.row_slices() {
        let h: Vec<f64> = slice.entries.iter().map(|&e| hpsi[e]).collect();
        let l: Vec<f64> = slice.entries.iter().map(|&e| lambda[e]).collect();
        let out = row_update(slice, &slice.gather_x0(&c.x0), &h, &l, s.config().rho).unwrap();
        let gap = out.phi.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-6, "subsystem {}: {gap:e}", slice.subsystem);
    }
}

#[test]
fn row_update_reads_only_its_patch() {
    let c = case(3, 3, 4, 1, 3, |m| poly(m, 3));
    let s = solver(&c, AdmmConfig::default());
    let reach = d_sets(c.model.graph(), c.masks.d + 1);
    let part = c.model.partition();
    for slice in s.row_slices() {
        for &k in &slice.patch {
            assert!(reach.in_sets[slice.subsystem].contains(&part.state_owner(k)) || reach.out_sets[part.state_owner(k)].contains(&slice.subsystem));
        }
        let mut poisoned = DVector::from_element(c.model.n_states(), f64::NAN);
        for &k in &slice.patch {
            poisoned[k] = c.x0[k];
        }
        let ne = slice.entries.len();
        let out = row_update(slice, &slice.gather_x0(&poisoned), &vec![0.1; ne], &vec![0.0; ne], 1.0).unwrap();
        assert!(out.phi.iter().chain(&out.xi).all(|v| v.is_finite()));
    }
}

#[test]
fn single_subsystem_matches_the_oracle() {
    let c = case(1, 1, 5, 0, 4, |m| poly(m, 4));
    let cost = QuadraticCost::identity(&c.model);
    let sol = solve_dlmpc(&c.model, &c.spec, &cost, &c.masks, &c.x0, AdmmConfig::default().with_tolerance(1e-7)).unwrap();
    let oracle = solve_centralized(&c.model, &c.spec, &cost, Some(&c.masks), &c.x0, &OracleOptions::default()).unwrap();
    assert!((sol.u0 - oracle.u0).amax() <= 1e-4);
    assert!((sol.objective - oracle.objective).abs() <= 1e-4 * (1.0 + oracle.objective.abs()));
}

#[test]
fn localizability_follows_the_radius() {
    let c = case(4, 4, 0, 3, 5, |_| NoiseModel::None);
    assert!(check_localizability(&c.model, &c.masks, 5));
    assert!(!check_localizability(&c.model, &c.masks, 4));
    // Node 0 has no actuator, so node 1's disturbance leaks into it
    // unless the radius reaches it.
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let m = SystemModel::new(a, b, Partition::new(vec![1, 1], vec![0, 1]).unwrap()).unwrap();
    assert!(!check_localizability(&m, &locality_masks(&m, 0, 3), 3));
    assert!(check_localizability(&m, &locality_masks(&m, 1, 3), 3));
}

#[test]
fn worker_count_does_not_change_results() {
    let c = case(3, 3, 6, 2, 4, |m| poly(m, 4));
    let one = solver(&c, AdmmConfig::default()).solve(&c.x0).unwrap();
    let four = solver(&c, AdmmConfig { workers: 4, ..AdmmConfig::default() }).solve(&c.x0).unwrap();
    assert_eq!(one.iterations, four.iterations);
    assert_eq!(one.u0, four.u0);
    assert_eq!(one.telemetry, four.telemetry);
}

#[test]
fn warm_start_does_not_slow_the_next_step() {
    let c = case(4, 4, 7, 3, 5, |_| NoiseModel::None);
    let mut warm = solver(&c, AdmmConfig::default());
    let first = warm.solve(&c.x0).unwrap();
    let x1 = c.model.a() * &c.x0 + c.model.b() * &first.u0;
    let warm_iters = warm.solve(&x1).unwrap().iterations;
    let cold_iters = solver(&c, AdmmConfig::default()).solve(&x1).unwrap().iterations;
    assert!(warm_iters <= cold_iters, "warm {warm_iters} cold {cold_iters}");
}

#[test]
fn invalid_config_is_rejected() {
    let c = case(2, 2, 0, 1, 3, |_| NoiseModel::None);
    let cost = QuadraticCost::identity(&c.model);
    for bad in [
        AdmmConfig { rho: 0.0, ..AdmmConfig::default() },
        AdmmConfig { max_iter: 0, ..AdmmConfig::default() },
        AdmmConfig { workers: 0, ..AdmmConfig::default() },
        AdmmConfig::default().with_tolerance(-1.0),
    ] {
        assert!(DlmpcSolver::new(&c.model, &c.spec, &cost, &c.masks, bad).is_err());
    }
}
