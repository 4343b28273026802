//! One pipeline per subcommand. Each writes its artifacts and returns its gates.

use rayon::prelude::*;
use serde::Serialize;
use spde_smp::adjoint::{
    flow_estimates_check, random_fields, solve_first_adjoint, AdjointPath, FlowReport, SecondAdjointForm,
};
use spde_smp::control::ControlPath;
use spde_smp::engine::{path_cost, simulate_ensemble, solve_state};
use spde_smp::model::ProblemModel;
use spde_smp::smp::{
    brute_force_oracle, check_mp, final_duality_check, interior_knots, oracle_candidates, rate_estimate,
    FinalDualityRow, MpReport, OracleReport, RateFit,
};
use spde_smp::spectral::{SpectralField, SpectralSpace};
use spde_smp::stats::{Estimate, MeanAccumulator};
use spde_smp::stochastics::{bdg_lp_check, sample_wiener, BdgRow, FieldIntegrand, PathPrefix, TimeGrid};
use spde_smp::variation::{variation_sweep, Comparison, SweepConfig, SweepRow};

use crate::artifacts::{cell, num, opt_num, ArtifactWriter, Check, Table};
use crate::config::ExperimentConfig;
use crate::{CliError, Result};

/// First outer sample of the adjoint regression ensemble, disjoint from the
/// sweep samples `0..N` and the maximum-principle samples from `2^32`.
pub const FIT_OFFSET: u64 = 1 << 33;

pub(crate) fn numerical(stage: &str) -> impl Fn(spde_smp::Error) -> CliError + '_ {
    move |source| CliError::Numerical {
        stage: stage.to_string(),
        source,
    }
}

fn comparison_cells(c: Option<&Comparison>) -> Vec<String> {
    vec![
        opt_num(c.map(|c| c.lhs.mean)),
        opt_num(c.map(|c| c.rhs.mean)),
        opt_num(c.map(|c| c.gap.mean)),
        opt_num(c.map(|c| c.gap.std_error)),
    ]
}

pub fn simulate(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<Vec<Check>> {
    let model = cfg.model().map_err(numerical("simulate"))?;
    let grid = cfg.time_grid();
    let seeds = cfg.seeds();
    let u = cfg.base_control();
    let wts = model.space().grid().weights().to_vec();
    let n = cfg.ensemble.outer;
    let per_sample: Vec<(Vec<[f64; 3]>, f64)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let w = sample_wiener(&seeds, &grid, model.noise_dim(), i);
            let x = solve_state(&model, &u, &w, &grid)?;
            let stats = x
                .states
                .iter()
                .map(|s| {
                    let l2: f64 = s
                        .grid_values()
                        .iter()
                        .zip(&wts)
                        .map(|(v, w)| w * v * v)
                        .sum::<f64>()
                        .sqrt();
                    let sup = s.grid_values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    [l2, s.modes()[0], sup]
                })
                .collect();
            Ok((stats, path_cost(&model, &x, &grid)))
        })
        .collect::<spde_smp::Result<_>>()
        .map_err(numerical("simulate"))?;
    let mut t = Table::new(
        "Per-knot summary of the simulated state ensemble",
        &[
            ("knot", "time index"),
            ("t", "time"),
            ("mean_l2", "mean of the L2 norm of the state"),
            ("l2_std_error", "standard error of mean_l2"),
            ("mean_mode1", "mean first sine coefficient"),
            ("mode1_std_error", "standard error of mean_mode1"),
            ("max_sup", "largest grid sup-norm over samples"),
        ],
    );
    for k in 0..=grid.n_steps() {
        let l2: MeanAccumulator = per_sample.iter().map(|s| s.0[k][0]).collect();
        let m1: MeanAccumulator = per_sample.iter().map(|s| s.0[k][1]).collect();
        let sup = per_sample.iter().map(|s| s.0[k][2]).fold(0.0, f64::max);
        t.push(vec![
            cell(k),
            num(grid.time(k)),
            num(l2.mean()),
            num(l2.std_error()),
            num(m1.mean()),
            num(m1.std_error()),
            num(sup),
        ]);
    }
    out.write_csv("state_summary.csv", &t)?;
    let cost: MeanAccumulator = per_sample.iter().map(|s| s.1).collect();
    #[derive(Serialize)]
    struct CostDoc<'a> {
        scenario: &'a str,
        control: f64,
        samples: usize,
        cost: Estimate,
    }
    out.write_json(
        "cost.json",
        &CostDoc {
            scenario: &cfg.scenario,
            control: cfg.spike.base,
            samples: n,
            cost: cost.estimate(),
        },
    )?;
    Ok(vec![Check::new("state ensemble finite", true, format!("{n} paths"))])
}

/// Slope fits of the sweep and the per-ε trend test of the cost gap.
#[derive(Debug, Clone, Serialize)]
pub struct RateSummary {
    pub first_variation: RateFit,
    pub second_variation: RateFit,
    pub residual: RateFit,
    pub cost_gap: RateFit,
    /// `(gap − trend) / SE` per ε.
    pub cost_gap_z: Vec<f64>,
}

fn fit(points: Vec<(f64, f64)>, what: &str) -> Result<RateFit> {
    rate_estimate(&points).map_err(numerical(what))
}

pub fn rate_summary(rows: &[SweepRow]) -> Result<RateSummary> {
    let cost_gap = fit(
        rows.iter().map(|r| (r.epsilon, r.cost.gap.mean.abs())).collect(),
        "cost gap fit",
    )?;
    Ok(RateSummary {
        first_variation: fit(
            rows.iter().map(|r| (r.epsilon, r.norm_y)).collect(),
            "first variation fit",
        )?,
        second_variation: fit(
            rows.iter().map(|r| (r.epsilon, r.norm_z)).collect(),
            "second variation fit",
        )?,
        residual: fit(rows.iter().map(|r| (r.epsilon, r.residual)).collect(), "residual fit")?,
        cost_gap_z: rows
            .iter()
            .map(|r| {
                let trend = cost_gap.intercept.exp() * r.epsilon.powf(cost_gap.slope);
                (r.cost.gap.mean.abs() - trend) / r.cost.gap.std_error
            })
            .collect(),
        cost_gap,
    })
}

pub fn rate_checks(cfg: &ExperimentConfig, s: &RateSummary) -> Vec<Check> {
    let tol = &cfg.tolerances;
    let within = |x: f64, [lo, hi]: [f64; 2]| x >= lo && x <= hi;
    let worst_z = s.cost_gap_z.iter().fold(0.0f64, |m, z| m.max(z.abs()));
    vec![
        Check::new(
            "first variation order",
            within(s.first_variation.slope, tol.first_variation_slope),
            format!("slope {:.4} (r2 {:.3})", s.first_variation.slope, s.first_variation.r2),
        ),
        Check::new(
            "second variation order",
            within(s.second_variation.slope, tol.second_variation_slope),
            format!(
                "slope {:.4} (r2 {:.3})",
                s.second_variation.slope, s.second_variation.r2
            ),
        ),
        Check::new(
            "expansion residual",
            s.residual.slope >= tol.residual_slope_min,
            format!("slope {:.4} (r2 {:.3})", s.residual.slope, s.residual.r2),
        ),
        Check::new(
            "cost expansion",
            s.cost_gap.slope > tol.cost_slope_min && worst_z <= tol.se_multiple,
            format!("slope {:.4}, largest |gap - trend| = {worst_z:.2} SE", s.cost_gap.slope),
        ),
    ]
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(
        "Spike-variation sweep, one row per epsilon",
        &[
            ("epsilon", "spike width"),
            ("norm_y", "sup-in-time L^p norm of the first variation"),
            ("norm_z", "sup-in-time L2 norm of the second variation"),
            ("residual", "sup-in-time L2 norm of X^eps - X - Y - Z"),
            ("cost_lhs", "J(u^eps) - J(u)"),
            ("cost_rhs", "cost expansion"),
            ("cost_gap", "cost_lhs - cost_rhs"),
            ("cost_gap_std_error", "standard error of cost_gap"),
        ],
    );
    for r in rows {
        let mut row = vec![num(r.epsilon), num(r.norm_y), num(r.norm_z), num(r.residual)];
        row.extend(comparison_cells(Some(&r.cost)));
        t.push(row);
    }
    t
}

/// Variation sweep at `n_steps` over samples `0..samples`.
pub fn run_rates(
    cfg: &ExperimentConfig,
    n_steps: usize,
    exponents: [i32; 2],
    samples: usize,
    out: &mut ArtifactWriter,
    prefix: &str,
) -> Result<(Vec<SweepRow>, RateSummary)> {
    let model = cfg.model().map_err(numerical("rates"))?;
    let grid = TimeGrid::new(cfg.grid.horizon, n_steps).map_err(numerical("rates"))?;
    let mut sweep = cfg.sweep(false);
    sweep.epsilons = spde_smp::variation::dyadic_epsilons(exponents[0], exponents[1]);
    sweep.ensemble = samples;
    let rows =
        variation_sweep(&model, &cfg.base_control(), &cfg.seeds(), &grid, &sweep, None).map_err(numerical("rates"))?;
    out.write_csv(&format!("{prefix}rates.csv"), &sweep_table(&rows))?;
    let summary = rate_summary(&rows)?;
    out.write_json(&format!("{prefix}rates.json"), &summary)?;
    Ok((rows, summary))
}

pub fn rates(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<Vec<Check>> {
    let (_, s) = run_rates(
        cfg,
        cfg.grid.n_steps,
        cfg.spike.epsilon_exponents,
        cfg.ensemble.outer,
        out,
        "",
    )?;
    Ok(rate_checks(cfg, &s))
}

/// Fits the first adjoint on `fit_samples` paths under `control`.
pub fn fit_adjoint(
    cfg: &ExperimentConfig,
    model: &ProblemModel,
    control: &ControlPath,
    grid: &TimeGrid,
) -> Result<AdjointPath> {
    let paths = simulate_ensemble(model, control, &cfg.seeds(), grid, FIT_OFFSET, cfg.fit_samples())
        .map_err(numerical("adjoint ensemble"))?;
    solve_first_adjoint(model, &paths, grid, cfg.basis()).map_err(numerical("adjoint regression"))
}

pub fn adjoint_table(adj: &AdjointPath) -> Table {
    let mut t = Table::new(
        "Backward-sweep diagnostics of the first adjoint, one row per knot",
        &[
            ("knot", "time index"),
            ("t", "time"),
            ("p_norm2", "mean squared L2 norm of p"),
            ("q_norm2", "mean squared L2 norm of q, summed over noise components"),
            ("hbar_norm2", "mean squared L2 norm of the Hamiltonian curvature"),
            ("q_se_max", "largest regression standard error of a q coefficient"),
            ("ridge", "Tikhonov parameter when the ridge fallback was used"),
        ],
    );
    for (k, d) in adj.diagnostics.iter().enumerate() {
        t.push(vec![
            cell(k),
            num(d.t),
            num(d.p_norm2),
            num(d.q_norm2),
            num(d.hbar_norm2),
            num(d.q_se_max),
            opt_num(d.ridge),
        ]);
    }
    t
}

pub fn duality_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(
        "Adjoint duality identities per epsilon",
        &[
            ("epsilon", "spike width"),
            ("cost_lhs", "J(u^eps) - J(u)"),
            ("cost_rhs", "adjoint form of the cost expansion"),
            ("cost_gap", "cost_lhs - cost_rhs"),
            ("cost_gap_std_error", "standard error of cost_gap"),
            ("first_lhs", "terminal and running pairing with the first variation"),
            ("first_rhs", "window pairing of p and q with the control deltas"),
            ("first_gap", "first_lhs - first_rhs"),
            ("first_gap_std_error", "standard error of first_gap"),
            ("second_lhs", "terminal and running pairing with the second variation"),
            ("second_rhs", "pairing of p and q with the second-order forcing"),
            ("second_gap", "second_lhs - second_rhs"),
            ("second_gap_std_error", "standard error of second_gap"),
        ],
    );
    for r in rows {
        let mut row = vec![num(r.epsilon)];
        row.extend(comparison_cells(r.cost_adjoint.as_ref()));
        row.extend(comparison_cells(r.duality_first.as_ref()));
        row.extend(comparison_cells(r.duality_second.as_ref()));
        t.push(row);
    }
    t
}

/// Largest `|gap| / SE` of the two duality identities, and the largest `|gap|`.
pub fn duality_extremes(rows: &[SweepRow]) -> (f64, f64) {
    rows.iter()
        .flat_map(|r| [r.duality_first, r.duality_second])
        .flatten()
        .fold((0.0f64, 0.0f64), |(z, g), c| {
            let zc = if c.gap.std_error > 0.0 {
                c.gap.mean.abs() / c.gap.std_error
            } else if c.gap.mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            (z.max(zc), g.max(c.gap.mean.abs()))
        })
}

/// Adjoint fit plus the variation sweep with duality (and optionally final
/// duality) columns, at `grid` over `samples` outer paths.
pub fn run_duality(
    cfg: &ExperimentConfig,
    grid: &TimeGrid,
    samples: usize,
    final_duality: bool,
    out: &mut ArtifactWriter,
    prefix: &str,
) -> Result<(AdjointPath, SweepConfig, Vec<SweepRow>)> {
    let model = cfg.model().map_err(numerical("adjoint"))?;
    let u = cfg.base_control();
    let adj = fit_adjoint(cfg, &model, &u, grid)?;
    out.write_csv(&format!("{prefix}adjoint_diagnostics.csv"), &adjoint_table(&adj))?;
    let mut sweep = cfg.sweep(final_duality);
    sweep.ensemble = samples;
    let rows =
        variation_sweep(&model, &u, &cfg.seeds(), grid, &sweep, Some(&adj)).map_err(numerical("duality sweep"))?;
    out.write_csv(&format!("{prefix}duality.csv"), &duality_table(&rows))?;
    Ok((adj, sweep, rows))
}

pub fn adjoint(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<Vec<Check>> {
    let grid = cfg.time_grid();
    let (adj, _, rows) = run_duality(cfg, &grid, cfg.ensemble.outer, false, out, "")?;
    let (z, g) = duality_extremes(&rows);
    #[derive(Serialize)]
    struct Doc<'a> {
        used_ridge: bool,
        rows: &'a [SweepRow],
        largest_gap_in_se: f64,
        largest_gap: f64,
    }
    out.write_json(
        "duality.json",
        &Doc {
            used_ridge: adj.used_ridge(),
            rows: &rows,
            largest_gap_in_se: z,
            largest_gap: g,
        },
    )?;
    Ok(vec![Check::new(
        "duality identities",
        z <= cfg.tolerances.se_multiple,
        format!("largest gap {z:.2} SE"),
    )])
}

pub fn final_duality_table(rows: &[FinalDualityRow]) -> Table {
    let mut t = Table::new(
        "Curvature duality per epsilon",
        &[
            ("epsilon", "spike width"),
            ("lhs", "curvature pairing of the first variation"),
            ("lhs_std_error", "standard error of lhs"),
            ("rhs", "second-adjoint form on the diffusion deltas over the window"),
            ("rhs_std_error", "standard error of rhs"),
            ("gap", "lhs - rhs"),
            ("gap_std_error", "standard error of gap"),
            ("gap_over_epsilon", "gap / epsilon"),
        ],
    );
    for r in rows {
        let c = &r.comparison;
        t.push(vec![
            num(r.epsilon),
            num(c.lhs.mean),
            num(c.lhs.std_error),
            num(c.rhs.mean),
            num(c.rhs.std_error),
            num(c.gap.mean),
            num(c.gap.std_error),
            num(r.gap_over_epsilon),
        ]);
    }
    t
}

pub fn flow_table(reports: &[FlowReport]) -> Table {
    let mut t = Table::new(
        "Moment ratios of the linearized flow from one knot, one row per lag",
        &[
            ("knot", "starting knot"),
            ("lag", "s - t"),
            ("ratio", "largest L4 moment ratio over the test fields"),
            ("weighted_eta_1", "(s - t)^eta weighted ratio for the first eta"),
            ("weighted_eta_2", "(s - t)^eta weighted ratio for the second eta"),
        ],
    );
    for (r, row) in reports.iter().flat_map(|r| r.rows.iter().map(move |row| (r, row))) {
        t.push(vec![
            cell(r.knot),
            num(row.lag),
            num(row.ratio),
            opt_num(row.weighted.first().copied()),
            opt_num(row.weighted.get(1).copied()),
        ]);
    }
    t
}

/// Ratios bounded with no growth trend over `s`: the largest value over the
/// final quarter of lags stays within twice the largest over the rest.
/// Weighted ratios bounded by `bound` over every lag, the smallest included.
pub fn flow_verdict(reports: &[FlowReport], bound: f64) -> (bool, String) {
    let max = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(*x));
    let mut ok = true;
    let (mut worst, mut worst_w): (f64, f64) = (0.0, 0.0);
    let mut notes = Vec::new();
    for r in reports {
        let ratios: Vec<f64> = r.rows.iter().map(|x| x.ratio).collect();
        let tail = ratios.len() - ratios.len().div_ceil(4);
        let flat = max(&ratios[tail..]) <= 2.0 * max(&ratios[..tail]);
        if !flat {
            notes.push(format!("ratio grows over s from knot {}", r.knot));
        }
        worst = worst.max(max(&ratios));
        ok &= flat && ratios.iter().all(|x| x.is_finite() && *x <= bound);
        for (e, eta) in r.etas.iter().enumerate() {
            let w: Vec<f64> = r.rows.iter().map(|x| x.weighted[e]).collect();
            worst_w = worst_w.max(max(&w));
            ok &= w.iter().all(|x| x.is_finite() && *x <= bound);
            notes.push(format!("eta {eta} at the first lag from knot {}: {:.4}", r.knot, w[0]));
        }
    }
    notes.insert(
        0,
        format!("largest ratio {worst:.4}, largest weighted ratio {worst_w:.4}, bound {bound}"),
    );
    (ok, notes.join("; "))
}

pub fn flow_reports(
    cfg: &ExperimentConfig,
    model: &ProblemModel,
    u: &ControlPath,
    grid: &TimeGrid,
) -> Result<Vec<FlowReport>> {
    let seeds = cfg.seeds();
    let fs = random_fields(model.space(), &seeds, 4);
    let n = grid.n_steps();
    [n / 4, n / 2]
        .into_iter()
        .map(|k| {
            flow_estimates_check(model, u, &seeds, grid, k, 1 << 32, &fs, &[0.1, 0.2], cfg.ensemble.inner)
                .map_err(numerical("flow estimates"))
        })
        .collect()
}

pub fn second_adjoint(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<Vec<Check>> {
    let grid = cfg.time_grid();
    let model = cfg.model().map_err(numerical("second adjoint"))?;
    let u = cfg.base_control();
    let seeds = cfg.seeds();
    let adj = fit_adjoint(cfg, &model, &u, &grid)?;
    out.write_csv("adjoint_diagnostics.csv", &adjoint_table(&adj))?;

    let space = model.space().clone();
    let fs: Vec<SpectralField> = (1..=3).map(|k| space.sine(k)).collect();
    let outer = sample_wiener(&seeds, &grid, model.noise_dim(), 1 << 32);
    let x = solve_state(&model, &u, &outer, &grid).map_err(numerical("second adjoint"))?;
    let mut t = Table::new(
        "Gram matrix of the second-adjoint form on sin(k pi x), k = 1..3",
        &[
            ("knot", "time index"),
            ("t", "time"),
            ("i", "first test field"),
            ("j", "second test field"),
            ("value", "mean of the form over inner branches"),
            ("std_error", "standard error of value"),
        ],
    );
    for k in interior_knots(grid.n_steps(), cfg.mp.knots) {
        let form = SecondAdjointForm::new(&adj, &u, seeds, &outer, k, x.states[k].clone(), cfg.ensemble.inner)
            .map_err(|e| numerical(&format!("second adjoint at knot {k}"))(e))?;
        let g = form.gram(&fs).map_err(numerical("second adjoint"))?;
        for i in 0..fs.len() {
            for j in 0..fs.len() {
                t.push(vec![
                    cell(k),
                    num(grid.time(k)),
                    cell(i + 1),
                    cell(j + 1),
                    num(g.mean[i][j]),
                    num(g.std_error[i][j]),
                ]);
            }
        }
    }
    out.write_csv("form_values.csv", &t)?;

    let reports = flow_reports(cfg, &model, &u, &grid)?;
    out.write_csv("flow_estimates.csv", &flow_table(&reports))?;
    let (flow_ok, flow_detail) = flow_verdict(&reports, cfg.tolerances.flow_bound);

    let sweep = cfg.sweep(true);
    let rows = final_duality_check(&model, &u, &seeds, &grid, &sweep, &adj).map_err(numerical("final duality"))?;
    out.write_csv("final_duality.csv", &final_duality_table(&rows))?;
    let slope = fit(
        rows.iter().map(|r| (r.epsilon, r.comparison.gap.mean.abs())).collect(),
        "final duality fit",
    )?;
    #[derive(Serialize)]
    struct Doc<'a> {
        rows: &'a [FinalDualityRow],
        gap_fit: RateFit,
    }
    out.write_json(
        "final_duality.json",
        &Doc {
            rows: &rows,
            gap_fit: slope,
        },
    )?;
    Ok(vec![
        Check::new("flow estimates", flow_ok, flow_detail),
        Check::new(
            "final duality",
            slope.slope > cfg.tolerances.final_duality_slope_min,
            format!("slope {:.4} (r2 {:.3})", slope.slope, slope.r2),
        ),
    ])
}

pub fn oracle_table(r: &OracleReport, n_steps: usize, horizon: f64) -> Table {
    let mut t = Table::new(
        "Brute-force cost of every candidate control on common samples",
        &[
            ("first", "action before the switch"),
            ("second", "action after the switch"),
            ("switch_time", "switch time (horizon for constants)"),
            ("cost", "estimated cost"),
            ("cost_std_error", "standard error of cost"),
            ("gap_to_best", "paired cost difference to the best candidate"),
            ("gap_std_error", "standard error of gap_to_best"),
        ],
    );
    for row in &r.rows {
        let c = row.candidate;
        t.push(vec![
            num(c.first),
            num(c.second),
            num(c.switch as f64 * horizon / n_steps as f64),
            num(row.cost.mean),
            num(row.cost.std_error),
            num(row.gap_to_best.mean),
            num(row.gap_to_best.std_error),
        ]);
    }
    t
}

pub fn run_oracle(cfg: &ExperimentConfig, model: &ProblemModel, grid: &TimeGrid) -> Result<OracleReport> {
    let n = grid.n_steps();
    let switches: Vec<usize> = cfg
        .oracle
        .switch_fractions
        .iter()
        .map(|f| (f * n as f64).round() as usize)
        .collect();
    let candidates = oracle_candidates(model, n, &switches);
    brute_force_oracle(model, &cfg.seeds(), grid, &candidates, cfg.oracle.samples).map_err(numerical("oracle"))
}

pub fn oracle(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<Vec<Check>> {
    let grid = cfg.time_grid();
    let model = cfg.model().map_err(numerical("oracle"))?;
    let r = run_oracle(cfg, &model, &grid)?;
    out.write_csv("oracle.csv", &oracle_table(&r, grid.n_steps(), grid.horizon()))?;
    out.write_json("oracle.json", &r)?;
    let best = r.rows[r.best].candidate;
    Ok(vec![Check::new(
        "oracle optimum verified",
        r.verified,
        format!("best {:?} with cost {:.6}", best, r.rows[r.best].cost.mean),
    )])
}

/// Maximum-principle reports for the oracle's best and worst candidates.
#[derive(Debug, Clone, Serialize)]
pub struct MpOutcome {
    pub oracle_verified: bool,
    pub best_is_constant: bool,
    pub best: MpReport,
    pub worst: MpReport,
}

pub fn run_check_mp(cfg: &ExperimentConfig, out: &mut ArtifactWriter, prefix: &str) -> Result<MpOutcome> {
    let grid = cfg.time_grid();
    let model = cfg.model().map_err(numerical("check-mp"))?;
    let oracle = run_oracle(cfg, &model, &grid)?;
    out.write_csv(
        &format!("{prefix}oracle.csv"),
        &oracle_table(&oracle, grid.n_steps(), grid.horizon()),
    )?;
    let seeds = cfg.seeds();
    let mp_cfg = cfg.mp_config();
    let mut reports = Vec::new();
    for idx in [oracle.best, oracle.worst] {
        let u = oracle.rows[idx].candidate.control(grid.n_steps());
        let adj = fit_adjoint(cfg, &model, &u, &grid)?;
        reports.push(check_mp(&model, &u, &adj, &seeds, &mp_cfg).map_err(numerical("maximum principle"))?);
    }
    let worst = reports.pop().expect("two reports");
    let best = reports.pop().expect("two reports");
    let mut t = Table::new(
        "Maximum-principle statistic per (candidate, sample, knot, action)",
        &[
            ("candidate", "best or worst oracle candidate"),
            ("sample", "outer sample index"),
            ("knot", "time index"),
            ("t", "time"),
            ("u", "candidate action at the knot"),
            ("v", "tested action"),
            ("delta_h", "Hamiltonian difference"),
            ("quad", "second-adjoint quadratic term"),
            ("total", "delta_h + quad"),
            ("std_error", "standard error of total"),
        ],
    );
    for (name, r) in [("best", &best), ("worst", &worst)] {
        for row in &r.rows {
            t.push(vec![
                name.to_string(),
                cell(row.sample),
                cell(row.knot),
                num(row.t),
                num(row.u),
                num(row.v),
                num(row.delta_h),
                num(row.quad),
                num(row.total),
                num(row.std_error),
            ]);
        }
    }
    out.write_csv(&format!("{prefix}mp_rows.csv"), &t)?;
    let outcome = MpOutcome {
        oracle_verified: oracle.verified,
        best_is_constant: oracle.rows[oracle.best].candidate.is_constant(grid.n_steps()),
        best,
        worst,
    };
    #[derive(Serialize)]
    struct Doc {
        oracle_verified: bool,
        best_is_constant: bool,
        best_violation_fraction: f64,
        worst_violation_fraction: f64,
        config: spde_smp::smp::MpConfig,
    }
    out.write_json(
        &format!("{prefix}mp_report.json"),
        &Doc {
            oracle_verified: outcome.oracle_verified,
            best_is_constant: outcome.best_is_constant,
            best_violation_fraction: outcome.best.violation_fraction,
            worst_violation_fraction: outcome.worst.violation_fraction,
            config: outcome.best.config.clone(),
        },
    )?;
    Ok(outcome)
}

pub fn mp_check(cfg: &ExperimentConfig, o: &MpOutcome) -> Check {
    let tol = &cfg.tolerances;
    Check::new(
        "maximum principle",
        o.oracle_verified
            && o.best_is_constant
            && o.best.violation_fraction <= tol.mp_violation_budget
            && o.worst.violation_fraction > tol.mp_suboptimal_min,
        format!(
            "optimum verified {} (constant {}), violation fraction {:.4} at the optimum, {:.4} at the worst candidate",
            o.oracle_verified, o.best_is_constant, o.best.violation_fraction, o.worst.violation_fraction
        ),
    )
}

pub fn check_mp_cmd(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<Vec<Check>> {
    let o = run_check_mp(cfg, out, "")?;
    Ok(vec![mp_check(cfg, &o)])
}

/// `H = 1 + x`, deterministic.
struct Affine(Vec<f64>);

impl FieldIntegrand for Affine {
    fn dim(&self) -> usize {
        1
    }

    fn values(&self, _: usize, _: f64, _: PathPrefix<'_>) -> Vec<Vec<f64>> {
        vec![self.0.clone()]
    }
}

/// `H_t = e^{tA} sin(πx)`.
struct HeatFlow(SpectralField);

impl FieldIntegrand for HeatFlow {
    fn dim(&self) -> usize {
        1
    }

    fn values(&self, _: usize, t: f64, _: PathPrefix<'_>) -> Vec<Vec<f64>> {
        vec![self
            .0
            .apply_semigroup(t)
            .expect("nonnegative time")
            .grid_values()
            .to_vec()]
    }
}

/// `H_t = cos(W_t) sin(πx)`.
struct PathDependent(Vec<f64>);

impl FieldIntegrand for PathDependent {
    fn dim(&self) -> usize {
        1
    }

    fn values(&self, _: usize, _: f64, past: PathPrefix<'_>) -> Vec<Vec<f64>> {
        let c = past.value()[0].cos();
        vec![self.0.iter().map(|s| c * s).collect()]
    }
}

/// `H¹ = sin(πx)`, `H² = sign(W¹_t)·4x(1−x)`.
struct TwoComponent(Vec<f64>, Vec<f64>);

impl FieldIntegrand for TwoComponent {
    fn dim(&self) -> usize {
        2
    }

    fn values(&self, _: usize, _: f64, past: PathPrefix<'_>) -> Vec<Vec<f64>> {
        let s = if past.value()[0] >= 0.0 { 1.0 } else { -1.0 };
        vec![self.0.clone(), self.1.iter().map(|v| s * v).collect()]
    }
}

pub fn bdg_integrands(space: &std::sync::Arc<SpectralSpace>) -> Vec<(&'static str, Box<dyn FieldIntegrand>)> {
    let pts = space.grid().points();
    let sine: Vec<f64> = pts.iter().map(|x| (std::f64::consts::PI * x).sin()).collect();
    vec![
        ("affine", Box::new(Affine(pts.iter().map(|x| 1.0 + x).collect()))),
        ("heat-flow", Box::new(HeatFlow(space.sine(1)))),
        ("path-dependent", Box::new(PathDependent(sine.clone()))),
        (
            "two-component",
            Box::new(TwoComponent(sine, pts.iter().map(|x| 4.0 * x * (1.0 - x)).collect())),
        ),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct BdgEntry {
    pub integrand: String,
    #[serde(flatten)]
    pub row: BdgRow,
}

pub fn run_bdg(cfg: &ExperimentConfig, out: &mut ArtifactWriter, prefix: &str) -> Result<Vec<BdgEntry>> {
    let space = cfg.space();
    let grid = cfg.time_grid();
    let seeds = cfg.seeds();
    let h = grid.horizon();
    let times = [h / 4.0, h / 2.0, h];
    let mut entries = Vec::new();
    for (name, integrand) in bdg_integrands(&space) {
        for &p in &cfg.bdg.exponents {
            let r = bdg_lp_check(p, integrand.as_ref(), &space, &grid, &seeds, cfg.bdg.samples, &times)
                .map_err(numerical("stochastic integral bound"))?;
            entries.extend(r.rows.into_iter().map(|row| BdgEntry {
                integrand: name.into(),
                row,
            }));
        }
    }
    let mut t = Table::new(
        "Both sides of the L^p stochastic-integral bound",
        &[
            ("integrand", "test integrand"),
            ("p", "exponent"),
            ("t", "upper time limit"),
            ("c_p", "constant of the bound"),
            ("lhs", "E of the L^p norm of the stochastic integral, to the p"),
            ("lhs_std_error", "standard error of lhs"),
            ("rhs", "c_p times the quadratic-variation side"),
            ("ratio", "lhs / rhs"),
            ("ratio_upper99", "bootstrap 99% upper confidence bound of ratio"),
        ],
    );
    for e in &entries {
        let r = &e.row;
        t.push(vec![
            e.integrand.clone(),
            num(r.p),
            num(r.t),
            num(r.c_p),
            num(r.lhs),
            num(r.lhs_std_error),
            num(r.rhs),
            num(r.ratio),
            num(r.ratio_upper99),
        ]);
    }
    out.write_csv(&format!("{prefix}bdg.csv"), &t)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        samples: usize,
        rows: &'a [BdgEntry],
    }
    out.write_json(
        &format!("{prefix}bdg.json"),
        &Doc {
            samples: cfg.bdg.samples,
            rows: &entries,
        },
    )?;
    Ok(entries)
}

pub fn bdg_check(cfg: &ExperimentConfig, entries: &[BdgEntry]) -> Check {
    let max = cfg.tolerances.bdg_ratio_max;
    let failing: Vec<String> = entries
        .iter()
        .filter(|e| !(e.row.ratio <= max && e.row.ratio_upper99 < max))
        .map(|e| {
            format!(
                "{} p={} t={}: ratio {:.4}, upper {:.4}",
                e.integrand, e.row.p, e.row.t, e.row.ratio, e.row.ratio_upper99
            )
        })
        .collect();
    let worst = entries.iter().fold(0.0f64, |m, e| m.max(e.row.ratio_upper99));
    let detail = if failing.is_empty() {
        format!("{} cases, largest upper bound {worst:.4}", entries.len())
    } else {
        format!(
            "{} of {} cases fail: {}",
            failing.len(),
            entries.len(),
            failing.join("; ")
        )
    };
    Check::new("stochastic integral bound", failing.is_empty(), detail)
}

pub fn bdg(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<Vec<Check>> {
    let entries = run_bdg(cfg, out, "")?;
    Ok(vec![bdg_check(cfg, &entries)])
}
