use dlmpc::qp::{eq_ls_closed_form, kkt_residuals, solve_qp, QpProblem, QpStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;
const MAX_ITER: usize = 200;

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = randn(rng, n, n);
    m.transpose() * m + DMatrix::identity(n, n) * 0.5
}

/// QP with a known optimum: rows in `active` hold with equality and carry
/// positive multipliers, the rest are strictly slack.
fn planted(rng: &mut ChaCha8Rng, n: usize, m: usize, active: usize) -> (QpProblem, DVector<f64>, DVector<f64>) {
    let q = spd(rng, n);
    let f = randn(rng, m, n);
    let z = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let lambda = DVector::from_fn(m, |i, _| if i < active { rng.random_range(0.5..2.0) } else { 0.0 });
    let slack = DVector::from_fn(m, |i, _| if i < active { 0.0 } else { rng.random_range(0.5..2.0) });
    let g = &f * &z + slack;
    let c = -(&q * &z) - f.transpose() * &lambda;
    (QpProblem::new(q, c).with_ineq(f, g), z, lambda)
}

#[test]
fn infeasible_box_is_reported() {
    let f = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
    let g = DVector::from_vec(vec![-1.0, -1.0]);
    let p = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1)).with_ineq(f, g);
    let sol = solve_qp(&p, TOL, MAX_ITER).unwrap();
    assert_ne!(sol.status, QpStatus::Optimal);
    assert!(sol.into_optimal().is_err());
}

#[test]
fn redundant_equalities_are_accepted() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = randn(&mut rng, 6, 4);
    let v = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
    let row = randn(&mut rng, 1, 4);
    let p = DMatrix::from_fn(2, 4, |_, j| row[(0, j)]);
    let q = DVector::from_element(2, 0.3);
    let closed = eq_ls_closed_form(&m, &v, &p, &q).unwrap();
    assert!(((&p * &closed.z) - &q).amax() <= 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn planted_optimum_is_recovered(seed in any::<u64>(), n in 2usize..7, m in 1usize..8, frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let active = ((m.min(n) as f64) * frac) as usize;
        let (p, z, lambda) = planted(&mut rng, n, m, active);
        let sol = solve_qp(&p, TOL, MAX_ITER).unwrap().into_optimal().unwrap();
        prop_assert!((&sol.z - &z).amax() <= 1e-6);
        prop_assert!((&sol.lambda - &lambda).amax() <= 1e-5);
    }

    #[test]
    fn optimal_returns_satisfy_kkt(seed in any::<u64>(), n in 1usize..7, me in 0usize..3, mi in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let me = me.min(n - 1);
        let z_feas = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let e = randn(&mut rng, me, n);
        let f = randn(&mut rng, mi, n);
        let slack = DVector::from_fn(mi, |_, _| rng.random_range(0.0..1.0));
        let p = QpProblem::new(spd(&mut rng, n), DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
            .with_eq(e.clone(), &e * &z_feas)
            .with_ineq(f.clone(), &f * &z_feas + slack);
        let sol = solve_qp(&p, TOL, MAX_ITER).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        let scale = 1.0 + p.c.amax() + p.e_vec.amax() + p.f_vec.amax();
        prop_assert!(kkt_residuals(&p, &sol).max() <= 1e-8 * scale);
    }

    #[test]
    fn row_order_does_not_change_the_solution(seed in any::<u64>(), n in 2usize..6, m in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let active = (m / 2).min(n);
        let (p, _, _) = planted(&mut rng, n, m, active);
        let mut order: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let f = DMatrix::from_fn(m, n, |r, c| p.f_mat[(order[r], c)]);
        let g = DVector::from_fn(m, |r, _| p.f_vec[order[r]]);
        let shuffled = QpProblem::new(p.q.clone(), p.c.clone()).with_ineq(f, g);
        let a = solve_qp(&p, TOL, MAX_ITER).unwrap().into_optimal().unwrap();
        let b = solve_qp(&shuffled, TOL, MAX_ITER).unwrap().into_optimal().unwrap();
        prop_assert!((&a.z - &b.z).amax() <= 1e-6);
        for r in 0..m {
            prop_assert!((a.lambda[order[r]] - b.lambda[r]).abs() <= 1e-5);
        }
    }

    #[test]
    fn closed_form_matches_interior_point(seed in any::<u64>(), rows in 1usize..8, n in 1usize..6, k in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rows.max(n);
        let k = k.min(n - 1);
        let m = randn(&mut rng, rows, n);
        let v = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
        let p = randn(&mut rng, k, n);
        let q = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let closed = eq_ls_closed_form(&m, &v, &p, &q).unwrap();
        let qp = QpProblem::new(m.transpose() * &m, -(m.transpose() * &v)).with_eq(p, q);
        let ip = solve_qp(&qp, 1e-12, MAX_ITER).unwrap().into_optimal().unwrap();
        prop_assert!((&closed.z - &ip.z).amax() <= 1e-8 * (1.0 + ip.z.amax()));
        prop_assert!(kkt_residuals(&qp, &closed).max() <= 1e-8 * (1.0 + qp.c.amax() + qp.e_vec.amax()));
    }
}
