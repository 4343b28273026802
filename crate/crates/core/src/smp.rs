//! Hamiltonian, the maximum-principle statistic, the final duality check,
//! log-log rate fits and a brute-force control oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{AdjointPath, SecondAdjointForm};
use crate::control::ControlPath;
use crate::engine::{path_cost, solve_state};
use crate::error::{check_param, Error, Result};
use crate::model::{PointFields, ProblemModel};
use crate::spectral::SpectralField;
use crate::stats::{Estimate, MeanAccumulator};
use crate::stochastics::{sample_wiener, SeedPolicy, TimeGrid};
use crate::variation::{variation_sweep, Comparison, SweepConfig};

fn hamiltonian_of(fields: &PointFields, weights: &[f64], p: &[f64], q: &[&[f64]]) -> f64 {
    let mut s = 0.0;
    for i in 0..weights.len() {
        let mut v = fields.running[i].value + fields.drift[i].value * p[i];
        for (sj, qj) in fields.diffusion.iter().zip(q) {
            v += sj[i].value * qj[i];
        }
        s += weights[i] * v;
    }
    s
}

/// `∫_D [l + b p + Σ_j σ_j q^j] dx` at time `t`, action `v` and state `x`.
pub fn hamiltonian(
    model: &ProblemModel,
    t: f64,
    v: f64,
    x: &SpectralField,
    p: &SpectralField,
    q: &[SpectralField],
) -> f64 {
    let fields = model.point_fields(t, x.grid_values(), v);
    let qs: Vec<&[f64]> = q.iter().map(|f| f.grid_values()).collect();
    hamiltonian_of(&fields, model.space().grid().weights(), p.grid_values(), &qs)
}

/// One `(t, ω, v)` cell of the maximum-principle check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpRow {
    pub knot: usize,
    pub t: f64,
    pub sample: u64,
    pub u: f64,
    pub v: f64,
    pub delta_h: f64,
    pub quad: f64,
    pub total: f64,
    pub std_error: f64,
}

/// `ΔH = H(v) − H(u_t)` and `½ Σ_j ⟨P Δσ_j, Δσ_j⟩` at one knot of one path.
/// `v = u_t` gives an exact zero.
pub fn mp_statistic(
    adjoint: &AdjointPath,
    form: &SecondAdjointForm<'_>,
    x: &SpectralField,
    u: f64,
    v: f64,
) -> Result<MpRow> {
    let model = adjoint.model();
    let knot = form.knot();
    let t = adjoint.grid().time(knot);
    let (p, q) = adjoint.p_q(knot, x, u);
    let delta_h = hamiltonian(model, t, v, x, &p, &q) - hamiltonian(model, t, u, x, &p, &q);
    let base = model.point_fields(t, x.grid_values(), u);
    let pert = model.point_fields(t, x.grid_values(), v);
    let space = model.space();
    let dsig: Vec<SpectralField> = pert
        .diffusion
        .iter()
        .zip(&base.diffusion)
        .map(|(a, b)| {
            let g: Vec<f64> = a.iter().zip(b).map(|(a, b)| a.value - b.value).collect();
            space.field_from_grid(&g)
        })
        .collect();
    let quad = if dsig.iter().all(|f| f.modes().iter().all(|&c| c == 0.0)) {
        Estimate::exact(0.0)
    } else {
        let tr = form.trace(&dsig)?;
        Estimate {
            mean: 0.5 * tr.mean,
            std_error: 0.5 * tr.std_error,
        }
    };
    Ok(MpRow {
        knot,
        t,
        sample: form.outer_sample(),
        u,
        v,
        delta_h,
        quad: quad.mean,
        total: delta_h + quad.mean,
        std_error: quad.std_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpConfig {
    pub knots: usize,
    pub samples: usize,
    pub branches: usize,
    /// Violation threshold in standard errors.
    pub threshold: f64,
    /// Index of the first outer sample.
    pub first_sample: u64,
}

impl Default for MpConfig {
    fn default() -> Self {
        Self {
            knots: 8,
            samples: 16,
            branches: 256,
            threshold: 3.0,
            first_sample: 1 << 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpReport {
    pub rows: Vec<MpRow>,
    /// Fraction of cells with `total < −threshold·SE`.
    pub violation_fraction: f64,
    pub config: MpConfig,
}

/// Knots `⌊(i + ½) n / m⌋`, `i < m`.
pub fn interior_knots(n_steps: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| ((2 * i + 1) * n_steps) / (2 * m)).collect()
}

/// Evaluates the maximum-principle statistic for every action in `U` at
/// sampled knots of fresh outer paths under `candidate`.
pub fn check_mp(
    model: &ProblemModel,
    candidate: &ControlPath,
    adjoint: &AdjointPath,
    seeds: &SeedPolicy,
    cfg: &MpConfig,
) -> Result<MpReport> {
    check_param("knots", cfg.knots as f64, cfg.knots >= 1, "need at least one knot")?;
    check_param(
        "samples",
        cfg.samples as f64,
        cfg.samples >= 1,
        "need at least one sample",
    )?;
    let grid = adjoint.grid();
    let knots = interior_knots(grid.n_steps(), cfg.knots);
    let per_sample: Vec<Vec<MpRow>> = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|s| {
            let idx = cfg.first_sample + s;
            let w = sample_wiener(seeds, grid, model.noise_dim(), idx);
            let x = solve_state(model, candidate, &w, grid)?;
            let mut rows = Vec::new();
            for &k in &knots {
                let xk = x.states[k].clone();
                let form = SecondAdjointForm::new(adjoint, candidate, *seeds, &w, k, xk.clone(), cfg.branches)?;
                for &v in &model.controls {
                    rows.push(mp_statistic(adjoint, &form, &xk, x.controls[k], v)?);
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<MpRow> = per_sample.into_iter().flatten().collect();
    let bad = rows.iter().filter(|r| r.total < -cfg.threshold * r.std_error).count();
    Ok(MpReport {
        violation_fraction: if rows.is_empty() {
            0.0
        } else {
            bad as f64 / rows.len() as f64
        },
        rows,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalDualityRow {
    pub epsilon: f64,
    pub comparison: Comparison,
    pub gap_over_epsilon: f64,
}

/// Curvature of `Y^ε` against `∫⟨P_s Δσ_j, Δσ_j⟩ds` over the window, per ε.
pub fn final_duality_check(
    model: &ProblemModel,
    u: &ControlPath,
    seeds: &SeedPolicy,
    grid: &TimeGrid,
    cfg: &SweepConfig,
    adjoint: &AdjointPath,
) -> Result<Vec<FinalDualityRow>> {
    if cfg.final_duality_knots.is_none() {
        return Err(Error::Config("final duality needs `final_duality_knots`".into()));
    }
    Ok(variation_sweep(model, u, seeds, grid, cfg, Some(adjoint))?
        .into_iter()
        .map(|r| {
            let c = r.final_duality.expect("final duality requested");
            FinalDualityRow {
                epsilon: r.epsilon,
                comparison: c,
                gap_over_epsilon: c.gap.mean / r.epsilon,
            }
        })
        .collect())
}

/// Least-squares fit of `log value` against `log ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn rate_estimate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 4 {
        return Err(Error::RateFit {
            needed: 4,
            got: points.len(),
        });
    }
    if let Some(&(e, v)) = points.iter().find(|(e, v)| !(*e > 0.0 && *v > 0.0)) {
        return Err(Error::InvalidParameter {
            name: "rate point",
            value: if e > 0.0 { v } else { e },
            reason: "epsilons and values must be positive",
        });
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit { slope, intercept, r2 })
}

/// A candidate control of the brute-force search: `first` before knot
/// `switch`, `second` from it on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleCandidate {
    pub first: f64,
    pub second: f64,
    pub switch: usize,
}

impl OracleCandidate {
    pub fn control(&self, n_steps: usize) -> ControlPath {
        if self.first == self.second || self.switch >= n_steps {
            ControlPath::Constant(self.first)
        } else if self.switch == 0 {
            ControlPath::Constant(self.second)
        } else {
            ControlPath::two_piece(self.first, self.second, self.switch, n_steps)
        }
    }

    pub fn is_constant(&self, n_steps: usize) -> bool {
        matches!(self.control(n_steps), ControlPath::Constant(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub candidate: OracleCandidate,
    pub cost: Estimate,
    /// Paired `J(candidate) − J(best)`.
    pub gap_to_best: Estimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
    pub best: usize,
    pub worst: usize,
    /// Every other candidate is more than 3 standard errors above the best.
    pub verified: bool,
}

/// Candidates: every constant action and every two-piece control switching
/// at one of `switches`.
pub fn oracle_candidates(model: &ProblemModel, n_steps: usize, switches: &[usize]) -> Vec<OracleCandidate> {
    let mut out: Vec<OracleCandidate> = model
        .controls
        .iter()
        .map(|&u| OracleCandidate {
            first: u,
            second: u,
            switch: n_steps,
        })
        .collect();
    for &s in switches.iter().filter(|&&s| s > 0 && s < n_steps) {
        for &a in &model.controls {
            for &b in &model.controls {
                if a != b {
                    out.push(OracleCandidate {
                        first: a,
                        second: b,
                        switch: s,
                    });
                }
            }
        }
    }
    out
}

/// Cost of every candidate on the same samples `0..n`.
pub fn brute_force_oracle(
    model: &ProblemModel,
    seeds: &SeedPolicy,
    grid: &TimeGrid,
    candidates: &[OracleCandidate],
    n: usize,
) -> Result<OracleReport> {
    check_param("ensemble", n as f64, n >= 2, "need at least two samples")?;
    check_param(
        "candidates",
        candidates.len() as f64,
        !candidates.is_empty(),
        "need a candidate",
    )?;
    let controls: Vec<ControlPath> = candidates.iter().map(|c| c.control(grid.n_steps())).collect();
    let costs: Vec<Vec<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let w = sample_wiener(seeds, grid, model.noise_dim(), i);
            controls
                .iter()
                .map(|u| Ok(path_cost(model, &solve_state(model, u, &w, grid)?, grid)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let est: Vec<Estimate> = (0..candidates.len())
        .map(|c| costs.iter().map(|s| s[c]).collect::<MeanAccumulator>().estimate())
        .collect();
    let by = |better: fn(f64, f64) -> bool| {
        (0..est.len()).fold(0, |b, i| if better(est[i].mean, est[b].mean) { i } else { b })
    };
    let best = by(|a, b| a < b);
    let worst = by(|a, b| a > b);
    let rows: Vec<OracleRow> = (0..candidates.len())
        .map(|c| OracleRow {
            candidate: candidates[c],
            cost: est[c],
            gap_to_best: costs
                .iter()
                .map(|s| s[c] - s[best])
                .collect::<MeanAccumulator>()
                .estimate(),
        })
        .collect();
    let verified = rows
        .iter()
        .enumerate()
        .all(|(i, r)| i == best || r.gap_to_best.mean > 3.0 * r.gap_to_best.std_error);
    Ok(OracleReport {
        rows,
        best,
        worst,
        verified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::solve_first_adjoint;
    use crate::engine::simulate_ensemble;
    use crate::model::{build_scenario, ScenarioParams};
    use crate::regression::BasisSpec;
    use crate::spectral::SpectralSpace;
    use proptest::prelude::*;

    #[test]
    fn hamiltonian_definition_cases() {
        let space = SpectralSpace::new(16).unwrap();
        let heat = build_scenario("heat", &ScenarioParams::new(), &space, 1.0).unwrap();
        let x = space.sine(1);
        let one = space.field_from_fn(|_| 1.0);
        assert_eq!(hamiltonian(&heat, 0.0, 0.0, &x, &one, &[]), 0.0);
        let lq = build_scenario("lq", &ScenarioParams::new(), &space, 1.0).unwrap();
        let z = space.zero();
        let h = hamiltonian(&lq, 0.0, 1.0, &x, &z, &[z.clone(), z.clone()]);
        let direct: f64 = {
            let f = lq.point_fields(0.0, x.grid_values(), 1.0);
            space
                .grid()
                .integrate(&f.running.iter().map(|j| j.value).collect::<Vec<_>>())
        };
        assert!((h - direct).abs() < 1e-15);
    }

    #[test]
    fn unit_drift_against_unit_adjoint_integrates_to_one() {
        use crate::model::{Coefficients, Jet};
        use std::sync::Arc;
        let space = SpectralSpace::new(16).unwrap();
        let mut m = build_scenario("heat", &ScenarioParams::new(), &space, 1.0).unwrap();
        m.coefficients = Coefficients::new(
            Arc::new(|_, _, _, _| Jet::new(1.0, 0.0, 0.0)),
            vec![Arc::new(|_, _, _, _| Jet::ZERO)],
            Arc::new(|_, _, _, _| Jet::ZERO),
            Arc::new(|_, _| Jet::ZERO),
        );
        let ones = vec![1.0; space.n_points()];
        let f = m.point_fields(0.0, &ones, 0.0);
        let h = hamiltonian_of(&f, space.grid().weights(), &ones, &[&ones]);
        assert!((h - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rate_fit_synthetic_cases() {
        let eps: Vec<f64> = (4..10).map(|e| 2f64.powi(-e)).collect();
        let half: Vec<(f64, f64)> = eps.iter().map(|&e| (e, e.sqrt())).collect();
        let f = rate_estimate(&half).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let lin: Vec<(f64, f64)> = eps.iter().map(|&e| (e, 3.0 * e)).collect();
        let f = rate_estimate(&lin).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(
            rate_estimate(&lin[..3]),
            Err(Error::RateFit { needed: 4, got: 3 })
        ));
        let mut bad = lin.clone();
        bad[2].1 = 0.0;
        assert!(rate_estimate(&bad).is_err());
    }

    proptest! {
        #[test]
        fn rate_fit_tolerates_one_percent_noise(noise in proptest::collection::vec(-0.01f64..0.01, 6)) {
            let pts: Vec<(f64, f64)> = (4..10)
                .zip(&noise)
                .map(|(e, n)| {
                    let x = 2f64.powi(-e);
                    (x, x * x * (1.0 + n))
                })
                .collect();
            let f = rate_estimate(&pts).unwrap();
            prop_assert!((1.9..=2.1).contains(&f.slope));
        }
    }

    fn showcase(n_steps: usize) -> (ProblemModel, TimeGrid, AdjointPath, ControlPath) {
        let space = SpectralSpace::new(8).unwrap();
        let model = build_scenario("nonconvex-sigma", &ScenarioParams::new(), &space, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, n_steps).unwrap();
        let u = ControlPath::Constant(-1.0);
        let paths = simulate_ensemble(&model, &u, &SeedPolicy::new(2), &grid, 0, 64).unwrap();
        let adj = solve_first_adjoint(&model, &paths, &grid, BasisSpec::default()).unwrap();
        (model, grid, adj, u)
    }

    #[test]
    fn statistic_vanishes_for_the_same_action() {
        let (model, _, adj, u) = showcase(16);
        let cfg = MpConfig {
            knots: 2,
            samples: 2,
            branches: 4,
            ..MpConfig::default()
        };
        let r = check_mp(&model, &u, &adj, &SeedPolicy::new(2), &cfg).unwrap();
        assert_eq!(r.rows.len(), 2 * 2 * 2);
        for row in r.rows.iter().filter(|r| r.v == r.u) {
            assert_eq!((row.delta_h, row.quad, row.total), (0.0, 0.0, 0.0));
        }
        for row in &r.rows {
            assert_eq!(row.total, row.delta_h + row.quad);
            assert!(row.quad >= 0.0);
        }
        assert!((0.0..=1.0).contains(&r.violation_fraction));
    }

    #[test]
    fn singleton_control_set_never_violates() {
        let (model, _, adj, u) = showcase(16);
        let model = model.with_controls(vec![-1.0]);
        let cfg = MpConfig {
            knots: 2,
            samples: 2,
            branches: 2,
            ..MpConfig::default()
        };
        let r = check_mp(&model, &u, &adj, &SeedPolicy::new(2), &cfg).unwrap();
        assert_eq!(r.violation_fraction, 0.0);
    }

    #[test]
    fn oracle_ranks_with_common_random_numbers() {
        let (model, grid, _, _) = showcase(16);
        let cands = oracle_candidates(&model, 16, &[8]);
        assert_eq!(cands.len(), 4);
        let r = brute_force_oracle(&model, &SeedPolicy::new(3), &grid, &cands, 200).unwrap();
        assert_eq!(r.rows[r.best].gap_to_best, Estimate::exact(0.0));
        assert!(r.rows.iter().all(|row| row.gap_to_best.mean >= 0.0));
        assert!(r.rows[r.worst].cost.mean >= r.rows[r.best].cost.mean);
    }
}
