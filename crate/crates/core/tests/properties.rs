use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use ropdf::bench::relative_l2_error;
use ropdf::config::{parse_config_str, RunConfig};
use ropdf::density::kde_evaluate;
use ropdf::noise::ou_analytic_moments;
use ropdf::regression::{fold_assignment, ols_line};
use ropdf::solver::step_advection_into;
use ropdf::{total_mass, DensityField, OuParams, Qoi, Scheme, SpatialGrid1D};

fn field(grid: &SpatialGrid1D, values: Vec<Vec<f64>>) -> DensityField {
    DensityField {
        grid: grid.clone(),
        times: (0..values.len()).map(|k| k as f64 * 0.1).collect(),
        values,
        qoi: "omega_1".into(),
    }
}

fn profile(n_cells: usize, times: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0..5.0f64, n_cells), times)
        .prop_filter("nonzero", |v| v.iter().flatten().any(|&x| x > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relative_error_is_scale_free(
        y in profile(12, 3),
        e in profile(12, 3),
        c in 0.01..100.0f64,
    ) {
        let grid = SpatialGrid1D::new(-1.0, 1.0, 12).unwrap();
        let base = relative_l2_error(&field(&grid, e.clone()), &field(&grid, y.clone())).unwrap();
        let scale = |v: &Vec<Vec<f64>>| v.iter().map(|r| r.iter().map(|x| c * x).collect()).collect();
        let scaled = relative_l2_error(&field(&grid, scale(&e)), &field(&grid, scale(&y))).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0));
        prop_assert_eq!(relative_l2_error(&field(&grid, y.clone()), &field(&grid, y.clone())).unwrap(), 0.0);
        // a uniform relative perturbation gives exactly that relative error
        let bumped = y.iter().map(|r| r.iter().map(|x| 1.05 * x).collect()).collect();
        let err = relative_l2_error(&field(&grid, bumped), &field(&grid, y)).unwrap();
        prop_assert!((err - 0.05).abs() < 1e-12);
    }

    #[test]
    fn advection_step_balances_mass(
        f0 in prop::collection::vec(0.0..3.0f64, 40),
        a in prop::collection::vec(-1.0..1.0f64, 41),
        courant in 0.05..1.0f64,
        limited in any::<bool>(),
    ) {
        let dz = 0.1;
        let amax = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        let dt = courant * dz / amax;
        let scheme = if limited { Scheme::LaxWendroffLimited } else { Scheme::Upwind1 };
        let mut f = f0.clone();
        let mut flux = vec![0.0; 41];
        let outflow = step_advection_into(&mut f, &a, dz, dt, scheme, &mut flux).unwrap();
        let before = total_mass(&f0, dz);
        prop_assert!((total_mass(&f, dz) + outflow - before).abs() <= 1e-12 * before.max(1.0));
    }

    #[test]
    fn upwind_keeps_densities_nonnegative(
        f0 in prop::collection::vec(0.0..3.0f64, 40),
        a in prop::collection::vec(-1.0..1.0f64, 41),
        courant in 0.05..0.5f64,
    ) {
        // half the Courant limit covers converging interfaces on both sides
        let dz = 0.1;
        let amax = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        let dt = courant * dz / amax;
        let mut f = f0;
        let mut flux = vec![0.0; 41];
        for _ in 0..20 {
            step_advection_into(&mut f, &a, dz, dt, Scheme::Upwind1, &mut flux).unwrap();
            prop_assert!(f.iter().all(|&v| v >= -1e-14));
        }
    }

    #[test]
    fn kde_integrates_to_one_inside_the_grid(
        samples in prop::collection::vec(-1.0..1.0f64, 1..60),
        h in 0.05..0.4f64,
    ) {
        let grid = SpatialGrid1D::new(-4.0, 4.0, 800).unwrap();
        let f = kde_evaluate(&samples, h, &grid).unwrap();
        prop_assert!(f.iter().all(|&v| v >= 0.0));
        prop_assert!((total_mass(&f, grid.dz) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ou_variance_grows_monotonically(t1 in 0.0..5.0f64, dt in 0.0..5.0f64, rho in -0.9..0.9f64) {
        let params = OuParams::default();
        let r = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let eta0 = DVector::from_vec(vec![0.1, -0.2]);
        let (m1, c1) = ou_analytic_moments(&params, &r, &eta0, t1).unwrap();
        let (m2, c2) = ou_analytic_moments(&params, &r, &eta0, t1 + dt).unwrap();
        prop_assert!(c2[(0, 0)] >= c1[(0, 0)]);
        prop_assert!(c2[(0, 0)] <= params.alpha * params.alpha + 1e-15);
        prop_assert!(m2.norm() <= m1.norm() + 1e-15);
        // correlation is preserved at every time
        if t1 > 0.0 {
            prop_assert!((c1[(0, 1)] / c1[(0, 0)] - rho).abs() < 1e-12);
        }
    }

    #[test]
    fn folds_are_balanced(n in 10usize..500, k in 2usize..11, seed in any::<u64>()) {
        let labels = fold_assignment(n, k, seed);
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            prop_assert!(l < k);
            sizes[l] += 1;
        }
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(labels, fold_assignment(n, k, seed));
    }

    #[test]
    fn ols_recovers_exact_lines(
        x in prop::collection::vec(-10.0..10.0f64, 3..50),
        b0 in -5.0..5.0f64,
        b1 in -5.0..5.0f64,
    ) {
        let spread = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            - x.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        prop_assume!(spread > 1e-3);
        let y: Vec<f64> = x.iter().map(|v| b0 + b1 * v).collect();
        let line = ols_line(&x, &y).unwrap();
        prop_assert!((line.slope - b1).abs() < 1e-8);
        prop_assert!((line.intercept - b0).abs() < 1e-8);
    }

    #[test]
    fn qoi_names_round_trip(machine in 0usize..200, angle in any::<bool>()) {
        let q = if angle { Qoi::angle(machine) } else { Qoi::speed(machine) };
        prop_assert_eq!(Qoi::parse(&q.to_string()).unwrap(), q);
    }

    #[test]
    fn configs_round_trip(tol in 0.001..0.5f64, seed in any::<u64>(), cfl in 0.1..1.0f64) {
        let mut cfg = RunConfig::default();
        cfg.benchmark.tol = tol;
        cfg.sim.seed = seed;
        cfg.solver.cfl = cfl;
        let again = parse_config_str(&cfg.to_json().unwrap(), "roundtrip").unwrap();
        prop_assert_eq!(again, cfg);
    }
}
