mod common;

use common::*;
use proptest::prelude::*;
use rlf_core::flow::{
    build_flow_grid, estimate_compressibility, inverse_flow, lusin_budget_set, lusin_lipschitz_set, default_thresholds,
    pushforward_density, Integrator,
};
use rlf_core::transport::SpaceTimeDensity;
use rlf_core::vectorfield::{
    catalog, check_assumptions, estimate_divergence, AssumptionSampling, FieldParams, VectorField,
};

fn times(n: usize) -> Vec<f64> {
    (0..=n).map(|k| k as f64 / n as f64).collect()
}

#[test]
fn rotation_quarter_turn() {
    let f = VectorField::rotation(1.0, 2.0).unwrap();
    let half_pi = std::f64::consts::FRAC_PI_2;
    let x = Integrator::new(1e-3).flow(&f, 0.0, half_pi, &[1.0, 0.0]).unwrap();
    assert!(max_abs_diff(&x, &[0.0, 1.0]) < 1e-8);
    let y = inverse_flow(&f, half_pi, &[0.0, 1.0], 1e-3).unwrap();
    assert!(max_abs_diff(&y, &[1.0, 0.0]) < 1e-8);
}

#[test]
fn swirl_from_unit_circle() {
    let f = VectorField::swirl_power(0.75, 1.0).unwrap();
    let x = Integrator::new(1e-3).flow(&f, 0.0, 1.0, &[1.0, 0.0]).unwrap();
    assert!(max_abs_diff(&x, &[1.75f64.cos(), 1.75f64.sin()]) < 1e-6);
    let oracle = swirl_flow(0.75, 1.0, 0.0, &[1.0, 0.0]);
    assert!(max_abs_diff(&x, &oracle) < 1e-6);
}

#[test]
fn linear_divergence_integrals_are_exact() {
    let f = VectorField::linear(vec![1.0, 0.0, 0.0, 2.0], 1.0).unwrap();
    let grid = build_flow_grid(&f, 1.0, 0.2, &times(4), &Integrator::new(1e-3)).unwrap();
    for (j, t) in grid.times().iter().enumerate() {
        for i in 0..grid.count() {
            assert!((grid.div_integral(j, i) - 3.0 * t).abs() < 1e-8);
            let y = grid.base_point(i);
            assert!(max_abs_diff(grid.position(j, i), &diagonal_flow([1.0, 2.0], *t, 0.0, y)) < 1e-6);
        }
    }
    let c = estimate_compressibility(&grid);
    assert!((c / 3f64.exp() - 1.0).abs() < 0.01);
}

#[test]
fn rotation_density_ratio_is_one() {
    let f = VectorField::rotation(1.0, 1.0).unwrap();
    let grid = build_flow_grid(&f, 1.0, 0.1, &times(8), &Integrator::new(1e-3)).unwrap();
    for j in 0..grid.time_count() {
        for i in 0..grid.count() {
            assert!((grid.density_ratio(j, i) - 1.0).abs() <= 1e-10);
        }
    }
}

#[test]
fn linear_pushforward_density() {
    let f = VectorField::linear(vec![1.0, 0.0, 0.0, 2.0], 1.0).unwrap();
    let grid = build_flow_grid(&f, 1.0, 0.2, &times(4), &Integrator::new(1e-3)).unwrap();
    for j in 0..grid.time_count() {
        let rho = pushforward_density(&grid, j).unwrap();
        let t = grid.times()[j];
        let expected = (-3.0 * t).exp();
        for i in 0..grid.count() {
            let x = grid.position(j, i).to_vec();
            assert!((rho.value(t, &x) - expected).abs() < 1e-6);
        }
    }
}

#[test]
fn isometric_flows_keep_every_point() {
    for f in [VectorField::zero(2, 1.0).unwrap(), VectorField::rotation(1.0, 1.0).unwrap()] {
        let grid = build_flow_grid(&f, 1.0, 0.1, &times(4), &Integrator::new(1e-3)).unwrap();
        let k = lusin_lipschitz_set(&grid, 0.1 * grid.ball_measure(), &default_thresholds()).unwrap();
        assert_eq!(k.members.len(), grid.count());
        assert!((k.lip_constant - 1.0).abs() < 1e-6, "{}", k.lip_constant);
    }
}

#[test]
fn swirl_exclusions_concentrate_at_the_origin() {
    let f = VectorField::swirl_power(0.75, 1.0).unwrap();
    let grid = build_flow_grid(&f, 1.0, 0.05, &times(4), &Integrator::new(1e-3)).unwrap();
    let k = lusin_lipschitz_set(&grid, 0.1 * grid.ball_measure(), &default_thresholds()).unwrap();
    let excluded: Vec<f64> = (0..grid.count())
        .filter(|i| !k.contains(*i))
        .map(|i| {
            let y = grid.base_point(i);
            (y[0] * y[0] + y[1] * y[1]).sqrt()
        })
        .collect();
    assert!(!excluded.is_empty());
    let mean = excluded.iter().sum::<f64>() / excluded.len() as f64;
    assert!(mean < 0.3, "mean excluded radius {mean}");
}

#[test]
fn budget_set_uses_its_budget() {
    let f = VectorField::swirl_power(0.75, 1.0).unwrap();
    let grid = build_flow_grid(&f, 1.0, 0.1, &times(4), &Integrator::new(1e-3)).unwrap();
    let eps = 0.1 * grid.ball_measure();
    let k = lusin_budget_set(&grid, eps, 9).unwrap();
    assert!(k.complement_measure <= eps);
    assert!(k.complement_measure > eps - grid.cell_volume());
}

#[test]
fn swirl_passes_assumption_checks() {
    let f = VectorField::swirl_power(0.75, 1.0).unwrap();
    let r = check_assumptions(&f, &AssumptionSampling::new(1.0, 3, 21)).unwrap();
    assert!(r.div_sup <= 1e-6, "{}", r.div_sup);
    assert!(!r.divergence_unbounded);
    assert!(r.modulus_table.iter().all(|m| m.omega.is_finite()));
    let first = r.modulus_table.first().unwrap();
    let last = r.modulus_table.last().unwrap();
    assert!(first.omega <= last.omega);
}

#[test]
fn divergence_estimates_track_closed_forms() {
    let p = FieldParams::default();
    for name in ["zero", "constant", "rotation", "linear", "shear"] {
        let f = catalog(name, 2, 1.0, &p).unwrap();
        for x in disc_samples(100, 0.0, 1.0, 4) {
            let est = estimate_divergence(&f, 0.3, &x, 1e-3);
            assert!((est - f.divergence(0.3, &x)).abs() < 1e-8, "{name} at {x:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_matches_oracle(r in 0.0f64..1.0, theta in 0.0f64..6.3, s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let f = VectorField::rotation(1.0, 1.0).unwrap();
        let y = [r * theta.cos(), r * theta.sin()];
        let x = Integrator::new(1e-3).flow(&f, s, t, &y).unwrap();
        prop_assert!(max_abs_diff(&x, &rotation_flow(1.0, t, s, &y)) < 1e-9);
    }

    #[test]
    fn constant_field_is_exact(c0 in -1.0f64..1.0, c1 in -1.0f64..1.0, t in 0.0f64..1.0) {
        let f = VectorField::constant(vec![c0, c1], 1.0).unwrap();
        let x = Integrator::new(1e-3).flow(&f, 0.0, t, &[0.3, -0.2]).unwrap();
        prop_assert!(max_abs_diff(&x, &translation_flow([c0, c1], t, 0.0, &[0.3, -0.2])) < 1e-12);
    }

    #[test]
    fn grid_positions_start_at_base_points(dy in 0.1f64..0.5) {
        let f = VectorField::shear(1.0, 1.0).unwrap();
        let grid = build_flow_grid(&f, 1.0, dy, &times(2), &Integrator::new(1e-2)).unwrap();
        for i in 0..grid.count() {
            prop_assert_eq!(grid.position(0, i), grid.base_point(i));
            prop_assert_eq!(grid.div_integral(0, i), 0.0);
        }
    }
}
