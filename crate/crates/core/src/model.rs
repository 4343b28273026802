//! Controlled problem data: Nemytskii coefficients `b, σ_j, l, h` with their
//! first two derivatives in the state variable, initial datum, horizon and
//! the finite set of control actions.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spectral::{SpectralField, SpectralSpace};

/// Value and first two derivatives in `r` of a coefficient at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub const ZERO: Jet = Jet {
        value: 0.0,
        d1: 0.0,
        d2: 0.0,
    };

    pub fn new(value: f64, d1: f64, d2: f64) -> Self {
        Self { value, d1, d2 }
    }

    /// `a·r + c`.
    pub fn affine(a: f64, r: f64, c: f64) -> Self {
        Self::new(a * r + c, a, 0.0)
    }

    /// `½ q r²`.
    pub fn half_square(q: f64, r: f64) -> Self {
        Self::new(0.5 * q * r * r, q * r, q)
    }
}

/// `(t, x, r, u) ↦ Jet`.
pub type PointFn = Arc<dyn Fn(f64, f64, f64, f64) -> Jet + Send + Sync>;
/// `(x, r) ↦ Jet`.
pub type TerminalFn = Arc<dyn Fn(f64, f64) -> Jet + Send + Sync>;

#[derive(Clone)]
pub struct Coefficients {
    drift: PointFn,
    diffusion: Vec<PointFn>,
    running: PointFn,
    terminal: TerminalFn,
}

impl fmt::Debug for Coefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coefficients")
            .field("noise_dim", &self.diffusion.len())
            .finish_non_exhaustive()
    }
}

impl Coefficients {
    pub fn new(drift: PointFn, diffusion: Vec<PointFn>, running: PointFn, terminal: TerminalFn) -> Self {
        assert!(!diffusion.is_empty(), "need at least one noise component");
        Self {
            drift,
            diffusion,
            running,
            terminal,
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.diffusion.len()
    }

    pub fn drift(&self, t: f64, x: f64, r: f64, u: f64) -> Jet {
        (self.drift)(t, x, r, u)
    }

    pub fn diffusion(&self, j: usize, t: f64, x: f64, r: f64, u: f64) -> Jet {
        (self.diffusion[j])(t, x, r, u)
    }

    pub fn running_cost(&self, t: f64, x: f64, r: f64, u: f64) -> Jet {
        (self.running)(t, x, r, u)
    }

    pub fn terminal_cost(&self, x: f64, r: f64) -> Jet {
        (self.terminal)(x, r)
    }
}

/// Coefficients evaluated along one state field and one control action.
#[derive(Debug, Clone, Default)]
pub struct PointFields {
    pub drift: Vec<Jet>,
    pub diffusion: Vec<Vec<Jet>>,
    pub running: Vec<Jet>,
}

#[derive(Clone)]
pub struct ProblemModel {
    pub name: String,
    pub coefficients: Coefficients,
    pub x0: SpectralField,
    pub horizon: f64,
    /// Finite control set `U`.
    pub controls: Vec<f64>,
    /// Declared derivative bound `K`.
    pub bound: f64,
    /// Linear-growth profile `ψ̄`.
    pub psi_bar: SpectralField,
}

impl fmt::Debug for ProblemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemModel")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("controls", &self.controls)
            .field("noise_dim", &self.noise_dim())
            .finish_non_exhaustive()
    }
}

impl ProblemModel {
    pub fn space(&self) -> &Arc<SpectralSpace> {
        self.x0.space()
    }

    pub fn noise_dim(&self) -> usize {
        self.coefficients.noise_dim()
    }

    pub fn with_controls(mut self, controls: Vec<f64>) -> Self {
        self.controls = controls;
        self
    }

    /// Evaluates every coefficient on the grid values `state` at action `u`.
    pub fn point_fields(&self, t: f64, state: &[f64], u: f64) -> PointFields {
        let xs = self.space().grid().points();
        let c = &self.coefficients;
        PointFields {
            drift: xs.iter().zip(state).map(|(&x, &r)| c.drift(t, x, r, u)).collect(),
            diffusion: (0..c.noise_dim())
                .map(|j| {
                    xs.iter()
                        .zip(state)
                        .map(|(&x, &r)| c.diffusion(j, t, x, r, u))
                        .collect()
                })
                .collect(),
            running: xs
                .iter()
                .zip(state)
                .map(|(&x, &r)| c.running_cost(t, x, r, u))
                .collect(),
        }
    }

    pub fn terminal_fields(&self, state: &[f64]) -> Vec<Jet> {
        let xs = self.space().grid().points();
        xs.iter()
            .zip(state)
            .map(|(&x, &r)| self.coefficients.terminal_cost(x, r))
            .collect()
    }

    /// Checks the derivative bounds and linear growth on a sample of points
    /// `r ∈ [−r_max, r_max]`, every grid point, a few times and every action.
    pub fn spot_check(&self, r_max: f64) -> Result<()> {
        let k = self.bound;
        let xs = self.space().grid().points();
        let psi = self.psi_bar.grid_values();
        let c = &self.coefficients;
        let times = [0.0, 0.5 * self.horizon, self.horizon];
        let rs: Vec<f64> = (0..=16).map(|i| -r_max + 2.0 * r_max * i as f64 / 16.0).collect();
        let violation =
            |what: &str, v: f64| Error::Config(format!("model `{}` violates the {what} bound (value {v})", self.name));
        for &t in &times {
            for &u in &self.controls {
                for (i, &x) in xs.iter().enumerate() {
                    for &r in &rs {
                        let growth = k * (r.abs() + psi[i].abs()) + 1e-12;
                        let mut jets = vec![c.drift(t, x, r, u), c.running_cost(t, x, r, u)];
                        jets.extend((0..c.noise_dim()).map(|j| c.diffusion(j, t, x, r, u)));
                        for (n, jet) in jets.iter().enumerate() {
                            // Costs may grow quadratically, so their
                            // gradient is only held to linear growth.
                            let d1_cap = if n == 1 { k * (1.0 + r.abs()) } else { k };
                            if jet.d1.abs() > d1_cap + 1e-12 || jet.d2.abs() > k {
                                return Err(violation("derivative", jet.d1.abs().max(jet.d2.abs())));
                            }
                            if n != 1 && jet.value.abs() > growth {
                                return Err(violation("linear-growth", jet.value));
                            }
                        }
                        let h = c.terminal_cost(x, r);
                        if h.d1.abs() > k * (1.0 + r.abs()) + 1e-12 || h.d2.abs() > k {
                            return Err(violation("terminal derivative", h.d2));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scalar parameters of a named scenario.
pub type ScenarioParams = BTreeMap<String, f64>;

struct ParamReader<'a> {
    params: &'a ScenarioParams,
    used: Vec<&'static str>,
}

impl<'a> ParamReader<'a> {
    fn new(params: &'a ScenarioParams) -> Self {
        Self {
            params,
            used: Vec::new(),
        }
    }

    fn get(&mut self, key: &'static str, default: f64) -> f64 {
        self.used.push(key);
        self.params.get(key).copied().unwrap_or(default)
    }

    fn finish(self, scenario: &str) -> Result<()> {
        for key in self.params.keys() {
            if !self.used.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "unknown parameter `{key}` for scenario `{scenario}`"
                )));
            }
        }
        Ok(())
    }
}

/// Names accepted by [`build_scenario`].
pub const SCENARIOS: &[&str] = &[
    "heat",
    "lq",
    "nonconvex-sigma",
    "single-mode",
    "adjoint-closed-form",
    "second-adjoint-closed-form",
];

fn sin_pi(x: f64) -> f64 {
    (std::f64::consts::PI * x).sin()
}

/// Builds a registered model on `space` with horizon `horizon`.
///
/// * `heat`: `b = σ = l = 0`, `h = r²`, `x0 = a0·sin(πx)`.
/// * `lq`: `b = βr + γu·sin(πx)`, `σ_j = δ_j r + (ρ_j u + c_j) sin(πx)`,
///   `l = ½q r² + ½κu²`, `h = ½q_T r²`, two noise components.
/// * `nonconvex-sigma`: `U = {−1, +1}`, `b = β sin r + κu·sin(πx)`,
///   `σ = (γr + ρu + c) sin(πx)`, `l = ½q r²`, `h = ½q_T r²`.
/// * `single-mode`: `b = βr + γu·e_1`, `σ = δr + ρu·e_1`, `x0 = sin(πx)`,
///   which keeps the state on the first eigenfunction.
/// * `adjoint-closed-form`: `b = σ = l = 0`, `h = r` (so `h' ≡ 1`).
/// * `second-adjoint-closed-form`: `b = l = 0`, constant `σ`, `h = ½r²`.
pub fn build_scenario(
    name: &str,
    params: &ScenarioParams,
    space: &Arc<SpectralSpace>,
    horizon: f64,
) -> Result<ProblemModel> {
    let mut p = ParamReader::new(params);
    let zero: PointFn = Arc::new(|_, _, _, _| Jet::ZERO);
    let unit_psi = space.field_from_fn(|_| 2.0);
    let model = match name {
        "heat" => {
            let a0 = p.get("a0", 1.0);
            let x0 = space.field_from_fn(|x| a0 * sin_pi(x));
            ProblemModel {
                name: name.into(),
                coefficients: Coefficients::new(
                    zero.clone(),
                    vec![zero.clone()],
                    zero,
                    Arc::new(|_, r| Jet::new(r * r, 2.0 * r, 2.0)),
                ),
                x0,
                horizon,
                controls: vec![0.0],
                bound: 2.0,
                psi_bar: unit_psi,
            }
        }
        "lq" => {
            let beta = p.get("beta", -0.5);
            let gamma = p.get("gamma", 0.5);
            let q = p.get("q", 1.0);
            let q_t = p.get("q_terminal", 1.0);
            let kappa = p.get("kappa", 0.1);
            let a0 = p.get("a0", 1.0);
            let noise: Vec<PointFn> = [
                (p.get("delta1", 0.2), p.get("rho1", 0.3), p.get("c1", 0.5)),
                (p.get("delta2", 0.1), p.get("rho2", -0.2), p.get("c2", 0.2)),
            ]
            .into_iter()
            .map(|(d, r, c)| -> PointFn { Arc::new(move |_, x, s, u| Jet::affine(d, s, (r * u + c) * sin_pi(x))) })
            .collect();
            let bound = [beta.abs(), q, q_t, 1.0].into_iter().fold(0.0, f64::max) + gamma.abs() + kappa + 1.0;
            ProblemModel {
                name: name.into(),
                coefficients: Coefficients::new(
                    Arc::new(move |_, x, r, u| Jet::affine(beta, r, gamma * u * sin_pi(x))),
                    noise,
                    Arc::new(move |_, _, r, u| {
                        let j = Jet::half_square(q, r);
                        Jet::new(j.value + 0.5 * kappa * u * u, j.d1, j.d2)
                    }),
                    Arc::new(move |_, r| Jet::half_square(q_t, r)),
                ),
                x0: space.field_from_fn(|x| a0 * sin_pi(x)),
                horizon,
                controls: vec![-1.0, 0.0, 1.0],
                bound,
                psi_bar: unit_psi,
            }
        }
        "nonconvex-sigma" => {
            let beta = p.get("beta", 0.5);
            let kappa = p.get("kappa", 0.0);
            let gamma = p.get("gamma", 0.2);
            let rho = p.get("rho", 0.5);
            let c = p.get("c", 1.0);
            let q = p.get("q", 1.0);
            let q_t = p.get("q_terminal", 1.0);
            let a0 = p.get("a0", 1.0);
            let bound = [beta.abs(), gamma.abs(), q, q_t, kappa.abs() + rho.abs() + c.abs()]
                .into_iter()
                .fold(1.0, f64::max);
            ProblemModel {
                name: name.into(),
                coefficients: Coefficients::new(
                    Arc::new(move |_, x, r, u| {
                        let (s, co) = r.sin_cos();
                        Jet::new(beta * s + kappa * u * sin_pi(x), beta * co, -beta * s)
                    }),
                    vec![Arc::new(move |_, x, r, u| {
                        let sx = sin_pi(x);
                        Jet::new((gamma * r + rho * u + c) * sx, gamma * sx, 0.0)
                    })],
                    Arc::new(move |_, _, r, _| Jet::half_square(q, r)),
                    Arc::new(move |_, r| Jet::half_square(q_t, r)),
                ),
                x0: space.field_from_fn(|x| a0 * sin_pi(x)),
                horizon,
                controls: vec![-1.0, 1.0],
                bound,
                psi_bar: unit_psi,
            }
        }
        "single-mode" => {
            let beta = p.get("beta", 0.3);
            let gamma = p.get("gamma", 0.7);
            let delta = p.get("delta", 0.4);
            let rho = p.get("rho", 0.25);
            let u0 = p.get("u", 1.0);
            let e1 = |x: f64| std::f64::consts::SQRT_2 * sin_pi(x);
            ProblemModel {
                name: name.into(),
                coefficients: Coefficients::new(
                    Arc::new(move |_, x, r, u| Jet::affine(beta, r, gamma * u * e1(x))),
                    vec![Arc::new(move |_, x, r, u| Jet::affine(delta, r, rho * u * e1(x)))],
                    Arc::new(|_, _, r, _| Jet::half_square(1.0, r)),
                    Arc::new(|_, r| Jet::half_square(1.0, r)),
                ),
                x0: space.sine(1),
                horizon,
                controls: vec![u0],
                bound: [beta.abs(), delta.abs(), 1.0].into_iter().fold(0.0, f64::max) + 2.0 * (gamma.abs() + rho.abs()),
                psi_bar: space.field_from_fn(|_| 2.0),
            }
        }
        "adjoint-closed-form" => ProblemModel {
            name: name.into(),
            coefficients: Coefficients::new(
                zero.clone(),
                vec![Arc::new(|_, x, _, _| Jet::new(0.3 * sin_pi(x), 0.0, 0.0))],
                zero,
                Arc::new(|_, r| Jet::new(r, 1.0, 0.0)),
            ),
            x0: space.field_from_fn(sin_pi),
            horizon,
            controls: vec![0.0],
            bound: 1.0,
            psi_bar: unit_psi,
        },
        "second-adjoint-closed-form" => {
            let s0 = p.get("sigma", 0.3);
            ProblemModel {
                name: name.into(),
                coefficients: Coefficients::new(
                    zero.clone(),
                    vec![Arc::new(move |_, x, _, u| {
                        Jet::new((s0 + 0.1 * u) * sin_pi(x), 0.0, 0.0)
                    })],
                    zero,
                    Arc::new(|_, r| Jet::half_square(1.0, r)),
                ),
                x0: space.field_from_fn(sin_pi),
                horizon,
                controls: vec![-1.0, 1.0],
                bound: 1.0,
                psi_bar: unit_psi,
            }
        }
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    p.finish(name)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_scenario_builds_and_passes_spot_checks() {
        let space = SpectralSpace::new(16).unwrap();
        for name in SCENARIOS {
            let m = build_scenario(name, &ScenarioParams::new(), &space, 1.0).unwrap();
            m.spot_check(3.0).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!m.controls.is_empty());
        }
    }

    #[test]
    fn unknown_names_and_keys_are_rejected() {
        let space = SpectralSpace::new(8).unwrap();
        assert!(matches!(
            build_scenario("nope", &ScenarioParams::new(), &space, 1.0),
            Err(Error::UnknownScenario(_))
        ));
        let mut params = ScenarioParams::new();
        params.insert("bogus".into(), 1.0);
        let err = build_scenario("lq", &params, &space, 1.0).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn spot_check_catches_large_derivatives() {
        let space = SpectralSpace::new(8).unwrap();
        let mut m = build_scenario("nonconvex-sigma", &ScenarioParams::new(), &space, 1.0).unwrap();
        m.bound = 0.1;
        assert!(m.spot_check(1.0).is_err());
    }

    #[test]
    fn jets_carry_derivatives() {
        let space = SpectralSpace::new(8).unwrap();
        let m = build_scenario("nonconvex-sigma", &ScenarioParams::new(), &space, 1.0).unwrap();
        let j = m.coefficients.drift(0.0, 0.5, 0.3, 1.0);
        let h = 1e-5;
        let jp = m.coefficients.drift(0.0, 0.5, 0.3 + h, 1.0);
        let jm = m.coefficients.drift(0.0, 0.5, 0.3 - h, 1.0);
        assert!(((jp.value - jm.value) / (2.0 * h) - j.d1).abs() < 1e-8);
        assert!(((jp.d1 - jm.d1) / (2.0 * h) - j.d2).abs() < 1e-8);
    }
}
