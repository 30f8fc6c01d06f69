use dlmpc::constraints::{BoxBounds, ConstraintSpec, LocalNorm, NoiseModel, Polytope, QuadraticCost};
use dlmpc::dlmpc::{AdmmConfig, DlmpcController, DlmpcSolver};
use dlmpc::model::{d_sets, generate_power_grid, locality_masks, GridParams, SystemModel};
use dlmpc::netsim::{first_step_polytope, run_closed_loop, NoiseGen, NoiseKind, Phase};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: usize = 4;
const D: usize = 2;

fn model(rows: usize, cols: usize, seed: u64) -> SystemModel {
    generate_power_grid(&GridParams {
        rows,
        cols,
        ..GridParams::baseline(seed)
    })
    .unwrap()
    .model
}

fn bounds(m: &SystemModel) -> BoxBounds {
    let x_max = DVector::from_fn(m.n_states(), |k, _| if k % 2 == 0 { 2.0 } else { 0.8 });
    BoxBounds::symmetric(x_max, DVector::from_element(m.n_inputs(), 1.5))
}

fn x0(m: &SystemModel, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(m.n_states(), |_, _| rng.random_range(-1.0..1.0))
}

fn box_poly(m: &SystemModel, horizon: usize, half: f64) -> Polytope {
    let n = m.n_states();
    Polytope::local_box(m, horizon, &DVector::from_element(n, -half), &DVector::from_element(n, half)).unwrap()
}

fn dlmpc_solver(m: &SystemModel, noise: NoiseModel) -> DlmpcSolver {
    let spec = ConstraintSpec::boxes(m, T, &bounds(m), noise).unwrap();
    DlmpcSolver::new(m, &spec, &QuadraticCost::identity(m), &locality_masks(m, D, T), AdmmConfig::default()).unwrap()
}

#[test]
fn messages_scale_with_iterations_and_stay_local() {
    let m = model(3, 3, 2);
    let mut s = dlmpc_solver(&m, NoiseModel::None);
    // One message per (sender, receiver) pair within reach, self included.
    let expected: u64 = d_sets(m.graph(), D + 1).out_sets.iter().map(|s| s.len() as u64).sum();
    let mut per_iter = Vec::new();
    for seed in [1, 2] {
        s.reset_warm_start();
        let sol = s.solve(&x0(&m, seed)).unwrap();
        let comm = &sol.stats.comm;
        let it = sol.iterations as u64;
        assert_eq!(comm.messages(Phase::StateShare), expected);
        for phase in [Phase::RowShare, Phase::ColShare] {
            assert_eq!(comm.messages(phase), expected * it);
            assert!(comm.max_hops(phase) <= D + 1);
        }
        per_iter.push((
            comm.messages(Phase::StateShare),
            comm.messages(Phase::RowShare) / it,
            comm.messages(Phase::ColShare) / it,
        ));
    }
    assert_eq!(per_iter[0], per_iter[1]);
}

#[test]
fn plant_replay_is_exact() {
    let m = model(2, 3, 5);
    let poly = box_poly(&m, T, 0.05);
    let step = first_step_polytope(&poly, m.n_states());
    let mut ctrl = DlmpcController::new(dlmpc_solver(&m, NoiseModel::Polytope(poly)));
    let mut noise = NoiseGen::new(NoiseKind::VertexAdversarial(step), &m, 9).unwrap();
    let traj = run_closed_loop(&m, &mut ctrl, &x0(&m, 5), &mut noise, 8).unwrap();
    assert_eq!(traj.steps(), 8);
    assert_eq!(ctrl.log.len(), 8);
    for t in 0..8 {
        let next = m.a() * &traj.x[t] + m.b() * &traj.u[t] + &traj.w[t];
        assert_eq!(next, traj.x[t + 1]);
    }
    assert_eq!(traj.violations(&bounds(&m), 1e-3), 0);
}

#[test]
fn uniform_local_noise_respects_sigma() {
    let m = model(3, 3, 1);
    let part = m.partition();
    for norm in [LocalNorm::Inf, LocalNorm::One, LocalNorm::Two] {
        let mut g = NoiseGen::new(NoiseKind::UniformLocal { norm, sigma: 0.2 }, &m, 3).unwrap();
        for _ in 0..50 {
            let d = g.sample(&DVector::zeros(m.n_states()));
            for i in 0..part.n_subsystems() {
                let block: Vec<f64> = part.state_range(i).map(|k| d[k]).collect();
                assert!(norm.primal(&block) <= 0.2 + 1e-12, "{norm}");
            }
        }
    }
}

#[test]
fn zero_noise_with_zero_controller_is_free_response() {
    let m = model(2, 2, 0);
    let x = x0(&m, 0);
    let p = m.n_inputs();
    let mut ctrl = |_: &DVector<f64>| Ok(DVector::zeros(p));
    let mut noise = NoiseGen::new(NoiseKind::Zero, &m, 0).unwrap();
    let traj = run_closed_loop(&m, &mut ctrl, &x, &mut noise, 5).unwrap();
    let mut expect = x;
    for t in 1..=5 {
        expect = m.a() * expect;
        assert_eq!(traj.x[t], expect);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn polytope_noise_stays_inside(seed in any::<u64>(), half in 0.01f64..0.5, adversarial in any::<bool>()) {
        let m = model(2, 3, seed % 100);
        let step = first_step_polytope(&box_poly(&m, 1, half), m.n_states());
        let kind = if adversarial { NoiseKind::VertexAdversarial(step.clone()) } else { NoiseKind::UniformPolytope(step.clone()) };
        let mut g = NoiseGen::new(kind, &m, seed).unwrap();
        let x = x0(&m, seed);
        for _ in 0..10 {
            let d = g.sample(&x);
            prop_assert!(step.contains(&d, 1e-12));
            if adversarial {
                for k in 0..m.n_states() {
                    prop_assert!(d[k].abs() == half);
                    prop_assert!(x[k] == 0.0 || d[k].signum() == x[k].signum());
                }
            }
        }
    }

    #[test]
    fn noise_streams_are_reproducible(seed in any::<u64>()) {
        let m = model(2, 2, 3);
        let kind = NoiseKind::UniformLocal { norm: LocalNorm::Two, sigma: 0.1 };
        let mut a = NoiseGen::new(kind.clone(), &m, seed).unwrap();
        let mut b = NoiseGen::new(kind, &m, seed).unwrap();
        let x = DVector::zeros(m.n_states());
        for _ in 0..5 {
            prop_assert_eq!(a.sample(&x), b.sample(&x));
        }
    }
}
