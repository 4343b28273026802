use spde_smp::control::ControlPath;
use spde_smp::engine::solve_state;
use spde_smp::model::{build_scenario, ScenarioParams};
use spde_smp::spectral::SpectralSpace;
use spde_smp::stochastics::{sample_wiener, SeedPolicy, TimeGrid};

#[allow(clippy::too_many_arguments)]
/// Scalar exponential Euler for `dy = (−π²y + βy + γu)dt + (δy + ρu)dW`.
fn scalar_path(y0: f64, dw: &[f64], dt: f64, beta: f64, gamma: f64, delta: f64, rho: f64, u: f64) -> Vec<f64> {
    let decay = (-std::f64::consts::PI.powi(2) * dt).exp();
    let mut y = vec![y0];
    for d in dw {
        let last = *y.last().unwrap();
        y.push(decay * (last + (beta * last + gamma * u) * dt + (delta * last + rho * u) * d));
    }
    y
}

#[test]
fn diagonal_configuration_matches_the_scalar_oracle_pathwise() {
    let space = SpectralSpace::new(32).unwrap();
    let mut params = ScenarioParams::new();
    params.insert("u".into(), -0.8);
    let model = build_scenario("single-mode", &params, &space, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 512).unwrap();
    let seeds = SeedPolicy::new(11);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let w = sample_wiener(&seeds, &grid, 1, i);
        let x = solve_state(&model, &ControlPath::Constant(-0.8), &w, &grid).unwrap();
        let oracle = scalar_path(
            x.states[0].modes()[0],
            w.increments(),
            grid.dt(),
            0.3,
            0.7,
            0.4,
            0.25,
            -0.8,
        );
        for (state, y) in x.states.iter().zip(&oracle) {
            let rel = (state.modes()[0] - y).abs() / y.abs().max(1e-300);
            worst = worst.max(rel);
            let leak: f64 = state.modes()[1..].iter().map(|c| c.abs()).fold(0.0, f64::max);
            assert!(leak < 1e-12 * y.abs().max(1.0), "higher modes excited: {leak}");
        }
    }
    assert!(worst <= 1e-10, "worst relative deviation {worst}");
}

#[test]
fn initial_mode_is_the_projection_of_sin_pi_x() {
    let space = SpectralSpace::new(8).unwrap();
    let model = build_scenario("single-mode", &ScenarioParams::new(), &space, 1.0).unwrap();
    assert!((model.x0.modes()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-14);
}
