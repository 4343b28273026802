//! Exponential-Euler time stepping of the controlled state equation and of
//! the generic linear equation
//! `dV = AV dt + (āV + ᾱ) dt + Σ_j (b̄^j V + β̄^j) dW^j`,
//! plus Monte Carlo cost estimation.

use std::sync::Arc;

use rayon::prelude::*;

use crate::control::ControlPath;
use crate::error::{check_param, Error, Result};
use crate::model::ProblemModel;
use crate::spectral::{lp_power_grid, SpectralField, SpectralSpace};
use crate::stats::{Estimate, MeanAccumulator, ProcessNorm};
use crate::stochastics::{sample_wiener, SeedPolicy, TimeGrid, WienerPath};

/// `e^{ΔtA}(X + drift·Δt + Σ_j noise_j ΔW^j)`.
pub fn mild_step(
    x: &SpectralField,
    drift: &SpectralField,
    noise: &[SpectralField],
    dw: &[f64],
    dt: f64,
) -> Result<SpectralField> {
    check_param("dt", dt, dt > 0.0, "time step must be positive")?;
    assert_eq!(noise.len(), dw.len(), "one increment per noise field");
    let mut y = x.axpy(dt, drift)?;
    for (n, w) in noise.iter().zip(dw) {
        y = y.axpy(*w, n)?;
    }
    y.apply_semigroup(dt)
}

/// Adds the projection of the grid increment `incr` to `modes` and applies
/// the precomputed decay factors.
fn advance(space: &Arc<SpectralSpace>, modes: &[f64], incr: &[f64], decay: &[f64]) -> SpectralField {
    let d = space.to_modes(incr);
    let next = modes.iter().zip(&d).zip(decay).map(|((m, d), e)| e * (m + d)).collect();
    space.field_from_modes(next)
}

/// Simulated state `X_{t_0}, …, X_{t_n}` with the realized controls.
#[derive(Debug, Clone)]
pub struct StatePath {
    pub states: Vec<SpectralField>,
    pub controls: Vec<f64>,
    pub sample_index: u64,
}

impl StatePath {
    pub fn n_steps(&self) -> usize {
        self.controls.len()
    }

    pub fn terminal(&self) -> &SpectralField {
        self.states.last().expect("nonempty path")
    }
}

/// Solves the state equation from `x_start` at knot `start` to the horizon.
/// `states[0]` of the result is `x_start`.
pub fn solve_state_from(
    model: &ProblemModel,
    control: &ControlPath,
    w: &WienerPath,
    grid: &TimeGrid,
    start: usize,
    x_start: SpectralField,
) -> Result<StatePath> {
    let n = grid.n_steps();
    if w.n_steps() != n {
        return Err(Error::Config(format!(
            "Wiener path has {} steps, time grid has {n}",
            w.n_steps()
        )));
    }
    if start > n {
        return Err(Error::KnotOutOfRange {
            index: start,
            n_steps: n,
        });
    }
    let space = model.space().clone();
    let dt = grid.dt();
    let decay = space.laplacian().decay_factors(dt);
    let xs = space.grid().points();
    let c = &model.coefficients;
    let d = c.noise_dim();
    let mut states = Vec::with_capacity(n - start + 1);
    let mut controls = Vec::with_capacity(n - start);
    let mut x = x_start;
    let mut incr = vec![0.0; xs.len()];
    for k in start..n {
        let t = grid.time(k);
        let u = control.value(k, &x);
        let dw = w.increment(k);
        for (i, (&xi, &r)) in xs.iter().zip(x.grid_values()).enumerate() {
            let mut v = c.drift(t, xi, r, u).value * dt;
            for (j, &dwj) in dw.iter().enumerate().take(d) {
                v += c.diffusion(j, t, xi, r, u).value * dwj;
            }
            incr[i] = v;
        }
        let next = advance(&space, x.modes(), &incr, &decay);
        if !next.is_finite() {
            return Err(Error::BlowUp {
                what: "state",
                knot: k + 1,
                sample: w.sample_index(),
            });
        }
        states.push(std::mem::replace(&mut x, next));
        controls.push(u);
    }
    states.push(x);
    Ok(StatePath {
        states,
        controls,
        sample_index: w.sample_index(),
    })
}

/// Solves the state equation on `[0, T]` driven by `w`.
pub fn solve_state(model: &ProblemModel, control: &ControlPath, w: &WienerPath, grid: &TimeGrid) -> Result<StatePath> {
    solve_state_from(model, control, w, grid, 0, model.x0.clone())
}

/// Samples `n` outer paths (indices `first..first+n`) and solves the state
/// equation on each. Output order follows the sample index.
pub fn simulate_ensemble(
    model: &ProblemModel,
    control: &ControlPath,
    seeds: &SeedPolicy,
    grid: &TimeGrid,
    first: u64,
    n: usize,
) -> Result<Vec<(WienerPath, StatePath)>> {
    (first..first + n as u64)
        .into_par_iter()
        .map(|i| {
            let w = sample_wiener(seeds, grid, model.noise_dim(), i);
            let x = solve_state(model, control, &w, grid)?;
            Ok((w, x))
        })
        .collect()
}

/// `Σ_k Δt ∫ l(t_k, X_k, u_k) + ∫ h(X_T)` along one path.
pub fn path_cost(model: &ProblemModel, path: &StatePath, grid: &TimeGrid) -> f64 {
    let space = model.space();
    let xs = space.grid().points();
    let wts = space.grid().weights();
    let c = &model.coefficients;
    let dt = grid.dt();
    let mut total = 0.0;
    for (k, (x, &u)) in path.states.iter().zip(&path.controls).enumerate() {
        let t = grid.time(k);
        let integral: f64 = xs
            .iter()
            .zip(x.grid_values())
            .zip(wts)
            .map(|((&xi, &r), w)| w * c.running_cost(t, xi, r, u).value)
            .sum();
        total += dt * integral;
    }
    let terminal: f64 = xs
        .iter()
        .zip(path.terminal().grid_values())
        .zip(wts)
        .map(|((&xi, &r), w)| w * c.terminal_cost(xi, r).value)
        .sum();
    total + terminal
}

/// Monte Carlo estimate of the cost functional over samples `0..n`.
pub fn estimate_cost(
    model: &ProblemModel,
    control: &ControlPath,
    seeds: &SeedPolicy,
    grid: &TimeGrid,
    n: usize,
) -> Result<Estimate> {
    check_param("ensemble", n as f64, n >= 2, "need at least two samples")?;
    let costs: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let w = sample_wiener(seeds, grid, model.noise_dim(), i);
            solve_state(model, control, &w, grid).map(|x| path_cost(model, &x, grid))
        })
        .collect::<Result<_>>()?;
    Ok(costs.into_iter().collect::<MeanAccumulator>().estimate())
}

/// `|||X|||_p` over samples `0..n`.
pub fn state_norm(
    model: &ProblemModel,
    control: &ControlPath,
    seeds: &SeedPolicy,
    grid: &TimeGrid,
    n: usize,
    p: f64,
) -> Result<ProcessNorm> {
    let w8 = model.space().grid().weights().to_vec();
    let rows: Vec<Vec<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let w = sample_wiener(seeds, grid, model.noise_dim(), i);
            let x = solve_state(model, control, &w, grid)?;
            Ok(x.states
                .iter()
                .map(|s| lp_power_grid(&w8, s.grid_values(), p))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut norm = ProcessNorm::new(p, grid.n_steps() + 1);
    rows.iter().for_each(|r| norm.push(r));
    Ok(norm)
}

/// Grid-valued coefficients of the linear equation at one knot. `None`
/// stands for the zero field.
#[derive(Debug, Clone, Default)]
pub struct LinearTerms {
    pub a: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub b: Vec<Option<Vec<f64>>>,
    pub beta: Vec<Option<Vec<f64>>>,
}

impl LinearTerms {
    pub fn zero(noise_dim: usize) -> Self {
        Self {
            a: None,
            alpha: None,
            b: vec![None; noise_dim],
            beta: vec![None; noise_dim],
        }
    }
}

/// Progressive coefficients `ā, ᾱ, b̄^j, β̄^j` of the linear template,
/// indexed by absolute knot.
pub trait LinearSPDESpec {
    fn noise_dim(&self) -> usize;
    fn terms(&self, knot: usize) -> LinearTerms;
}

/// Solves the linear template from `v0` at knot `start`; the result holds
/// `V_{t_start}, …, V_{t_n}`.
pub fn solve_linear(
    spec: &dyn LinearSPDESpec,
    w: &WienerPath,
    grid: &TimeGrid,
    start: usize,
    v0: SpectralField,
) -> Result<Vec<SpectralField>> {
    let n = grid.n_steps();
    if start > n {
        return Err(Error::KnotOutOfRange {
            index: start,
            n_steps: n,
        });
    }
    let space = v0.space().clone();
    let dt = grid.dt();
    let decay = space.laplacian().decay_factors(dt);
    let np = space.n_points();
    let mut out = Vec::with_capacity(n - start + 1);
    let mut v = v0;
    let mut incr = vec![0.0; np];
    for k in start..n {
        let terms = spec.terms(k);
        let dw = w.increment(k);
        let vg = v.grid_values();
        incr.iter_mut().for_each(|x| *x = 0.0);
        if let Some(a) = &terms.a {
            for i in 0..np {
                incr[i] += a[i] * vg[i] * dt;
            }
        }
        if let Some(al) = &terms.alpha {
            for i in 0..np {
                incr[i] += al[i] * dt;
            }
        }
        for (j, &dwj) in dw.iter().enumerate() {
            if let Some(Some(b)) = terms.b.get(j) {
                for i in 0..np {
                    incr[i] += b[i] * vg[i] * dwj;
                }
            }
            if let Some(Some(be)) = terms.beta.get(j) {
                for i in 0..np {
                    incr[i] += be[i] * dwj;
                }
            }
        }
        let next = advance(&space, v.modes(), &incr, &decay);
        if !next.is_finite() {
            return Err(Error::BlowUp {
                what: "linear equation",
                knot: k + 1,
                sample: w.sample_index(),
            });
        }
        out.push(std::mem::replace(&mut v, next));
    }
    out.push(v);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_scenario, Coefficients, Jet, ScenarioParams};
    use crate::stochastics::SeedPolicy;

    #[test]
    fn zero_forcing_is_a_pure_semigroup_step() {
        let space = SpectralSpace::new(16).unwrap();
        let x = space.field_from_fn(|x| x * (1.0 - x));
        let y = mild_step(&x, &space.zero(), &[space.zero()], &[0.3], 0.01).unwrap();
        let z = x.apply_semigroup(0.01).unwrap();
        for (a, b) in y.modes().iter().zip(z.modes()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn without_diffusion_the_step_is_plain_euler() {
        let space = SpectralSpace::with_resolution(8, 16, 0.0).unwrap();
        let x = space.sine(1);
        let c = space.sine(2);
        let y = mild_step(&x, &c, &[], &[], 0.1).unwrap();
        let expect = x.axpy(0.1, &c).unwrap();
        for (a, b) in y.modes().iter().zip(expect.modes()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_mode_step_matches_scalar_arithmetic() {
        let space = SpectralSpace::new(8).unwrap();
        let y0 = 0.7;
        let x = space.sine(1).scaled(y0 * std::f64::consts::SQRT_2);
        let drift = x.scaled(0.4);
        let noise = x.scaled(-0.2);
        let (dt, dw) = (0.01, 0.05);
        let out = mild_step(&x, &drift, &[noise], &[dw], dt).unwrap();
        let scalar = (-std::f64::consts::PI.powi(2) * dt).exp() * (y0 + 0.4 * y0 * dt - 0.2 * y0 * dw);
        assert!((out.modes()[0] - scalar).abs() < 1e-14);
        assert!(out.modes()[1..].iter().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn heat_equation_is_reproduced_exactly() {
        let space = SpectralSpace::new(16).unwrap();
        let model = build_scenario("heat", &ScenarioParams::new(), &space, 0.5).unwrap();
        let grid = TimeGrid::new(0.5, 50).unwrap();
        let w = sample_wiener(&SeedPolicy::new(1), &grid, 1, 0);
        let path = solve_state(&model, &ControlPath::Constant(0.0), &w, &grid).unwrap();
        for (k, x) in path.states.iter().enumerate() {
            let exact = model.x0.apply_semigroup(grid.time(k)).unwrap();
            for (a, b) in x.modes().iter().zip(exact.modes()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn deterministic_cost_examples() {
        let space = SpectralSpace::new(32).unwrap();
        let model = build_scenario("heat", &ScenarioParams::new(), &space, 0.1).unwrap();
        let grid = TimeGrid::new(0.1, 20).unwrap();
        let j = estimate_cost(&model, &ControlPath::Constant(0.0), &SeedPolicy::new(3), &grid, 4).unwrap();
        let exact = (-2.0 * std::f64::consts::PI.powi(2) * 0.1).exp() / 2.0;
        assert!((j.mean - exact).abs() < 1e-12, "{} vs {exact}", j.mean);
        assert!((exact - 0.0694556).abs() < 1e-6);
        assert!(j.std_error < 1e-14);

        let unit = ProblemModel {
            coefficients: Coefficients::new(
                Arc::new(|_, _, _, _| Jet::ZERO),
                vec![Arc::new(|_, _, _, _| Jet::ZERO)],
                Arc::new(|_, _, _, _| Jet::new(1.0, 0.0, 0.0)),
                Arc::new(|_, _| Jet::ZERO),
            ),
            ..model
        };
        let j = estimate_cost(&unit, &ControlPath::Constant(0.0), &SeedPolicy::new(3), &grid, 4).unwrap();
        assert!((j.mean - 0.1).abs() < 1e-12);
    }

    #[test]
    fn blow_up_is_reported() {
        let space = SpectralSpace::new(8).unwrap();
        let mut model = build_scenario("heat", &ScenarioParams::new(), &space, 1.0).unwrap();
        model.coefficients = Coefficients::new(
            Arc::new(|_, _, r, _| Jet::new(1e300 * (1.0 + r * r), 0.0, 0.0)),
            vec![Arc::new(|_, _, _, _| Jet::ZERO)],
            Arc::new(|_, _, _, _| Jet::ZERO),
            Arc::new(|_, _| Jet::ZERO),
        );
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let w = sample_wiener(&SeedPolicy::new(1), &grid, 1, 5);
        let err = solve_state(&model, &ControlPath::Constant(0.0), &w, &grid).unwrap_err();
        assert!(matches!(err, Error::BlowUp { sample: 5, .. }));
    }

    struct ConstForcing(SpectralField);

    impl LinearSPDESpec for ConstForcing {
        fn noise_dim(&self) -> usize {
            1
        }
        fn terms(&self, _: usize) -> LinearTerms {
            LinearTerms {
                alpha: Some(self.0.grid_values().to_vec()),
                ..LinearTerms::zero(1)
            }
        }
    }

    #[test]
    fn linear_template_reproduces_the_mild_integral() {
        let space = SpectralSpace::new(16).unwrap();
        let c = space.field_from_fn(|x| 1.0 + x);
        let spec = ConstForcing(c.clone());
        let t = 0.5;
        let mut errs = Vec::new();
        for n in [100, 200, 400] {
            let grid = TimeGrid::new(t, n).unwrap();
            let w = sample_wiener(&SeedPolicy::new(1), &grid, 1, 0);
            let v = solve_linear(&spec, &w, &grid, 0, space.zero()).unwrap();
            let last = v.last().unwrap();
            let lam = space.laplacian().eigenvalues();
            let err: f64 = last
                .modes()
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let exact = c.modes()[k] * (1.0 - (-lam[k] * t).exp()) / lam[k];
                    (m - exact).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
        assert!(errs[0] < 1e-2);
        // First order in Δt.
        assert!((errs[0] / errs[1] - 2.0).abs() < 0.2, "{errs:?}");
        assert!((errs[1] / errs[2] - 2.0).abs() < 0.2, "{errs:?}");
    }

    #[test]
    fn unforced_linear_equation_stays_at_zero() {
        let space = SpectralSpace::new(8).unwrap();
        struct Multiplicative;
        impl LinearSPDESpec for Multiplicative {
            fn noise_dim(&self) -> usize {
                1
            }
            fn terms(&self, _: usize) -> LinearTerms {
                LinearTerms {
                    a: Some(vec![0.7; 16]),
                    b: vec![Some(vec![-0.4; 16])],
                    ..LinearTerms::zero(1)
                }
            }
        }
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let w = sample_wiener(&SeedPolicy::new(9), &grid, 1, 0);
        let v = solve_linear(&Multiplicative, &w, &grid, 0, space.zero()).unwrap();
        assert!(v.iter().all(|f| f.modes().iter().all(|&c| c == 0.0)));
        assert_eq!(v.len(), 33);
    }
}
