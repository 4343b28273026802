use std::f64::consts::PI;
use std::sync::Arc;

use spde_smp::adjoint::{
    adjoint_representation_check, composition_check, flow_estimates_check, random_fields, solve_first_adjoint,
    weak_continuity, AdjointPath,
};
use spde_smp::control::ControlPath;
use spde_smp::engine::simulate_ensemble;
use spde_smp::model::{build_scenario, Coefficients, Jet, ProblemModel, ScenarioParams};
use spde_smp::regression::BasisSpec;
use spde_smp::spectral::SpectralSpace;
use spde_smp::stochastics::{SeedPolicy, TimeGrid};

fn solve(model: &ProblemModel, u: &ControlPath, steps: usize, n: usize, seed: u64) -> AdjointPath {
    let grid = TimeGrid::new(1.0, steps).unwrap();
    let paths = simulate_ensemble(model, u, &SeedPolicy::new(seed), &grid, 0, n).unwrap();
    solve_first_adjoint(model, &paths, &grid, BasisSpec::default()).unwrap()
}

#[test]
fn deterministic_adjoint_matches_the_constant_function_expansion() {
    let space = SpectralSpace::new(64).unwrap();
    let model = build_scenario("adjoint-closed-form", &ScenarioParams::new(), &space, 1.0).unwrap();
    let adj = solve(&model, &ControlPath::Constant(0.0), 64, 40, 1);
    let x = model.x0.clone();
    for k in [0usize, 32, 63] {
        let tau = 1.0 - adj.grid().time(k);
        let (p, q) = adj.p_q(k, &x, 0.0);
        // Odd modes of 1 are 2√2/(kπ); truncation error sits in the modes beyond 64.
        let mut err = 0.0;
        let mut norm = 0.0;
        for (i, c) in p.modes().iter().enumerate() {
            let m = (i + 1) as f64;
            let exact = if (i + 1) % 2 == 1 {
                2.0 * 2f64.sqrt() / (m * PI)
            } else {
                0.0
            } * (-m * m * PI * PI * tau).exp();
            err += (c - exact).powi(2);
            norm += exact * exact;
        }
        let rel = (err / norm).sqrt();
        assert!(rel < 1e-2, "knot {k}: {rel}");
        assert!(q[0].modes().iter().all(|c| c.abs() < 1e-10));
    }
}

#[test]
fn martingale_part_vanishes_without_state_dependent_noise() {
    let space = SpectralSpace::new(16).unwrap();
    let model = build_scenario("adjoint-closed-form", &ScenarioParams::new(), &space, 1.0).unwrap();
    let adj = solve(&model, &ControlPath::Constant(0.0), 32, 200, 2);
    for k in [0usize, 10, 31] {
        let (_, q) = adj.p_q(k, &model.x0, 0.0);
        let se = adj.q_standard_errors(k);
        for (c, s) in q[0].modes().iter().zip(se) {
            assert!(c.abs() <= 3.0 * s + 1e-12, "knot {k}: {c} vs {s}");
        }
    }
}

#[test]
fn adjoint_agrees_with_the_forward_flow_representation() {
    let space = SpectralSpace::new(16).unwrap();
    let model = build_scenario("lq", &ScenarioParams::new(), &space, 1.0).unwrap();
    let u = ControlPath::Constant(0.0);
    let adj = solve(&model, &u, 64, 600, 3);
    let seeds = SeedPolicy::new(33);
    let fs = [space.sine(1), space.field_from_fn(|x| x * (1.0 - x) * 4.0)];
    for knot in [16usize, 40] {
        for f in &fs {
            let c = adjoint_representation_check(&adj, &u, &seeds, knot, f, 10_000, 300).unwrap();
            assert!(c.gap.mean.abs() <= 3.0 * c.gap.std_error, "knot {knot}: {c:?}");
        }
    }
}

#[test]
fn curvature_assembly_cases() {
    let space = SpectralSpace::new(16).unwrap();
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let seeds = SeedPolicy::new(4);

    let lq = build_scenario("lq", &ScenarioParams::new(), &space, 1.0).unwrap();
    let u = ControlPath::Constant(0.0);
    let paths = simulate_ensemble(&lq, &u, &seeds, &grid, 0, 30).unwrap();
    let adj = solve_first_adjoint(&lq, &paths, &grid, BasisSpec::default()).unwrap();
    let c = adj.curvature(&paths[0].1, 0);
    assert!(c.hbar.iter().flatten().all(|&h| h == 1.0));

    let heat = build_scenario("heat", &ScenarioParams::new(), &space, 1.0).unwrap();
    let paths = simulate_ensemble(&heat, &u, &seeds, &grid, 0, 30).unwrap();
    let adj = solve_first_adjoint(&heat, &paths, &grid, BasisSpec::default()).unwrap();
    let c = adj.curvature(&paths[0].1, 0);
    assert!(c.terminal.iter().all(|&h| h == 2.0));

    // b = r², l = 0, σ = const: H̄ = 2p.
    let mut quad = build_scenario("heat", &ScenarioParams::new(), &space, 0.25).unwrap();
    quad.coefficients = Coefficients::new(
        Arc::new(|_, _, r, _| Jet::new(r * r, 2.0 * r, 2.0)),
        vec![Arc::new(|_, x, _, _| Jet::new(0.2 * (PI * x).sin(), 0.0, 0.0))],
        Arc::new(|_, _, _, _| Jet::ZERO),
        Arc::new(|_, r| Jet::new(r, 1.0, 0.0)),
    );
    quad.x0 = space.field_from_fn(|x| 0.1 * (PI * x).sin());
    let g = TimeGrid::new(0.25, 16).unwrap();
    let paths = simulate_ensemble(&quad, &u, &seeds, &g, 0, 60).unwrap();
    let adj = solve_first_adjoint(&quad, &paths, &g, BasisSpec::default()).unwrap();
    let path = &paths[0].1;
    let c = adj.curvature(path, 0);
    for k in [0usize, 7, 15] {
        let (p, _) = adj.p_q(k, &path.states[k], 0.0);
        for (h, pv) in c.hbar[k].iter().zip(p.grid_values()) {
            assert!((h - 2.0 * pv).abs() < 1e-12);
        }
    }
}

fn showcase() -> (ProblemModel, ControlPath, AdjointPath) {
    let space = SpectralSpace::new(16).unwrap();
    let model = build_scenario("nonconvex-sigma", &ScenarioParams::new(), &space, 1.0).unwrap();
    let u = ControlPath::Constant(-1.0);
    let adj = solve(&model, &u, 64, 300, 5);
    (model, u, adj)
}

#[test]
fn composition_with_state_measurable_fields_matches_the_tower_estimate() {
    let (model, u, adj) = showcase();
    let space = model.space().clone();
    let s1 = space.sine(1);
    let s2 = space.sine(2);
    let phi = move |x: &spde_smp::spectral::SpectralField| s1.scaled(1.0 + x.modes()[0].tanh());
    let gamma = move |x: &spde_smp::spectral::SpectralField| s2.axpy(x.modes()[0], x).unwrap();
    let c = composition_check(&adj, &u, &SeedPolicy::new(6), 32, 40, 16, &phi, &gamma).unwrap();
    assert!(c.gap.mean.abs() <= 3.0 * c.gap.std_error, "{c:?}");
}

#[test]
fn form_discrepancy_shrinks_with_the_knot_gap() {
    let (model, u, adj) = showcase();
    let space = model.space().clone();
    let f = space.sine(1);
    let g = space.field_from_fn(|x| x * (1.0 - x));
    let rows = weak_continuity(&adj, &u, &SeedPolicy::new(7), 24, &[16, 4, 1], 12, 8, &f, &g).unwrap();
    assert!(rows[2].1.mean < rows[0].1.mean, "{rows:?}");
}

#[test]
fn flow_moments_stay_bounded_on_the_showcase() {
    let (model, u, adj) = showcase();
    let space = model.space().clone();
    let seeds = SeedPolicy::new(8);
    let fs = random_fields(&space, &seeds, 4);
    let r = flow_estimates_check(&model, &u, &seeds, adj.grid(), 16, 0, &fs, &[0.1, 0.2], 32).unwrap();
    assert!(r.rows.iter().all(|row| row.ratio.is_finite() && row.ratio < 10.0));
    assert!(r
        .rows
        .iter()
        .all(|row| row.weighted.iter().all(|w| w.is_finite() && *w < 10.0)));
}
