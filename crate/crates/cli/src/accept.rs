//! The acceptance suite: thirteen criteria, each reported as one pass/fail line.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use spde_smp::adjoint::{solve_first_adjoint, SecondAdjointForm};
use spde_smp::control::ControlPath;
use spde_smp::engine::{simulate_ensemble, solve_state};
use spde_smp::model::{build_scenario, ScenarioParams};
use spde_smp::regression::BasisSpec;
use spde_smp::smp::rate_estimate;
use spde_smp::stochastics::{sample_wiener, TimeGrid};
use spde_smp::variation::SweepRow;

use crate::artifacts::{cell, ArtifactWriter, Check, ManifestInfo, RunManifest, Table, MANIFEST};
use crate::commands::{self, numerical};
use crate::config::ExperimentConfig;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Criterion {
    fn from_check(id: u32, c: Check) -> Self {
        Self {
            id,
            name: c.name,
            passed: c.passed,
            detail: c.detail,
        }
    }

    /// `[PASS] 07 second adjoint closed form: …`
    pub fn line(&self) -> String {
        format!(
            "[{}] {:02} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone)]
pub struct AcceptOutcome {
    pub criteria: Vec<Criterion>,
    pub manifest: RunManifest,
}

impl AcceptOutcome {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }
}

fn timed<T>(label: &str, times: &mut Vec<(String, f64)>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    eprintln!("accept: {label} ...");
    let out = f()?;
    let secs = start.elapsed().as_secs_f64();
    eprintln!("accept: {label} done in {secs:.1} s");
    times.push((label.to_string(), secs));
    Ok(out)
}

/// Sum over ε of `|gap|` for the first and second duality identities.
fn duality_gap_sums(rows: &[SweepRow]) -> [f64; 2] {
    let sum = |f: fn(&SweepRow) -> Option<f64>| rows.iter().filter_map(f).map(f64::abs).sum();
    [
        sum(|r| r.duality_first.map(|c| c.gap.mean)),
        sum(|r| r.duality_second.map(|c| c.gap.mean)),
    ]
}

/// Relative L² error of the first adjoint against `e^{(T−t)A}1`, worst knot.
fn adjoint_closed_form_error(cfg: &ExperimentConfig, n_steps: usize) -> Result<f64> {
    let space = cfg.space();
    let model = build_scenario("adjoint-closed-form", &ScenarioParams::new(), &space, cfg.grid.horizon)
        .map_err(numerical("adjoint closed form"))?;
    let grid = TimeGrid::new(cfg.grid.horizon, n_steps).map_err(numerical("adjoint closed form"))?;
    let u = ControlPath::Constant(0.0);
    let paths = simulate_ensemble(&model, &u, &cfg.seeds(), &grid, 0, 32).map_err(numerical("adjoint closed form"))?;
    let adj =
        solve_first_adjoint(&model, &paths, &grid, BasisSpec::default()).map_err(numerical("adjoint closed form"))?;
    let mut worst: f64 = 0.0;
    for k in 0..=n_steps {
        let tau = grid.horizon() - grid.time(k);
        let (p, _) = adj.p_q(k, &paths[0].1.states[k], 0.0);
        let (mut err, mut norm) = (0.0, 0.0);
        for (i, c) in p.modes().iter().enumerate() {
            let m = (i + 1) as f64;
            let exact = if i % 2 == 0 {
                2.0 * 2f64.sqrt() / (m * PI) * (-m * m * PI * PI * tau).exp()
            } else {
                0.0
            };
            err += (c - exact).powi(2);
            norm += exact * exact;
        }
        worst = worst.max((err / norm).sqrt());
    }
    Ok(worst)
}

/// Value of the second-adjoint form at `T − t = 0.1` with symmetry and
/// bilinearity defects.
fn second_adjoint_closed_form(cfg: &ExperimentConfig) -> Result<(f64, f64, f64, f64)> {
    let stage = "second adjoint closed form";
    let space = cfg.space();
    let model = build_scenario(
        "second-adjoint-closed-form",
        &ScenarioParams::new(),
        &space,
        cfg.grid.horizon,
    )
    .map_err(numerical(stage))?;
    // A multiple of ten steps puts T − 0.1 on the grid.
    let n = cfg.grid.n_steps.div_ceil(10) * 10;
    let grid = TimeGrid::new(cfg.grid.horizon, n).map_err(numerical(stage))?;
    let knot = grid.snap(grid.horizon() - 0.1, 1e-9).expect("on grid");
    let u = ControlPath::Constant(model.controls[0]);
    let seeds = cfg.seeds();
    let paths = simulate_ensemble(&model, &u, &seeds, &grid, 0, 32).map_err(numerical(stage))?;
    let adj = solve_first_adjoint(&model, &paths, &grid, BasisSpec::default()).map_err(numerical(stage))?;
    let (w, x) = &paths[0];
    let form = SecondAdjointForm::new(&adj, &u, seeds, w, knot, x.states[knot].clone(), cfg.ensemble.inner)
        .map_err(numerical(stage))?;
    let ev = |a: &_, b: &_| form.eval(a, b).map(|e| e.mean).map_err(numerical(stage));
    let s = space.sine(1);
    let value = ev(&s, &s)?;
    let f = space.field_from_fn(|x| x * (1.0 - x));
    let g = space.sine(3);
    let symmetry = (ev(&f, &g)? - ev(&g, &f)?).abs();
    let combo = f.scaled(2.5).axpy(1.0, &s).map_err(numerical(stage))?;
    let bilinearity = (ev(&combo, &g)? - 2.5 * ev(&f, &g)? - ev(&s, &g)?).abs();
    let tau = grid.horizon() - grid.time(knot);
    Ok((value, (-2.0 * PI * PI * tau).exp() / 2.0, symmetry, bilinearity))
}

/// Deviation of the first mode from the scalar exponential-Euler recursion:
/// worst over paths of `max_k |x_k − y_k| / max_k |y_k|`, worst pointwise
/// `|x_k − y_k| / |y_k|`, and the largest higher-mode coefficient.
fn single_mode_deviation(cfg: &ExperimentConfig) -> Result<(f64, f64, f64)> {
    let stage = "single-mode oracle";
    let (beta, gamma, delta, rho, u0) = (0.3, 0.7, 0.4, 0.25, -0.8);
    let params: ScenarioParams = [
        ("beta", beta),
        ("gamma", gamma),
        ("delta", delta),
        ("rho", rho),
        ("u", u0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let space = cfg.space();
    let model = build_scenario("single-mode", &params, &space, cfg.grid.horizon).map_err(numerical(stage))?;
    let grid = cfg.time_grid();
    let dt = grid.dt();
    let decay = (-PI * PI * dt).exp();
    let seeds = cfg.seeds();
    let (mut worst, mut pointwise, mut leak): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..cfg.accept.single_mode_paths as u64 {
        let w = sample_wiener(&seeds, &grid, 1, i);
        let x = solve_state(&model, &ControlPath::Constant(u0), &w, &grid).map_err(numerical(stage))?;
        let mut y = x.states[0].modes()[0];
        let (mut dev, mut scale): (f64, f64) = (0.0, 0.0);
        for (k, state) in x.states.iter().enumerate() {
            if k > 0 {
                let d = w.increment(k - 1)[0];
                y = decay * (y + (beta * y + gamma * u0) * dt + (delta * y + rho * u0) * d);
            }
            let diff = (state.modes()[0] - y).abs();
            dev = dev.max(diff);
            scale = scale.max(y.abs());
            pointwise = pointwise.max(diff / y.abs().max(f64::MIN_POSITIVE));
            leak = state.modes()[1..].iter().fold(leak, |m, c| m.max(c.abs()));
        }
        worst = worst.max(dev / scale);
    }
    Ok((worst, pointwise, leak))
}

/// Criteria 1–12 on one artifact directory.
pub fn run_suite(
    cfg: &ExperimentConfig,
    out: &mut ArtifactWriter,
    times: &mut Vec<(String, f64)>,
) -> Result<Vec<Criterion>> {
    let tol = cfg.tolerances.clone();
    let mut crit = Vec::new();

    let summary = timed("variation rates", times, || {
        commands::run_rates(
            cfg,
            cfg.accept.rates_n_steps,
            cfg.accept.rates_epsilon_exponents,
            cfg.accept.rates_samples,
            out,
            "c01_",
        )
        .map(|r| r.1)
    })?;
    for (i, c) in commands::rate_checks(cfg, &summary).into_iter().enumerate() {
        crit.push(Criterion::from_check(i as u32 + 1, c));
    }

    let grid = cfg.time_grid();
    let (coarse, fine) = timed("duality identities", times, || {
        let (_, _, coarse) = commands::run_duality(cfg, &grid, cfg.accept.duality_samples, true, out, "c05_")?;
        let (_, _, fine) = commands::run_duality(
            cfg,
            &grid.refined(),
            cfg.accept.duality_samples,
            false,
            out,
            "c05_refined_",
        )?;
        Ok((coarse, fine))
    })?;
    let (z_coarse, _) = commands::duality_extremes(&coarse);
    let (z_fine, _) = commands::duality_extremes(&fine);
    let [c1, c2] = duality_gap_sums(&coarse);
    let [f1, f2] = duality_gap_sums(&fine);
    let shrink = [c1 / f1, c2 / f2];
    let factor = tol.duality_refinement_factor;
    crit.push(Criterion {
        id: 5,
        name: "duality identities".into(),
        passed: z_coarse.max(z_fine) <= tol.se_multiple && shrink.iter().all(|s| *s >= factor),
        detail: format!(
            "largest gap {:.2} SE at dt, {:.2} SE at dt/2; gap shrink factors {:.3} (first), {:.3} (second), need {factor}",
            z_coarse, z_fine, shrink[0], shrink[1]
        ),
    });

    let (e_coarse, e_fine) = timed("first adjoint closed form", times, || {
        Ok((
            adjoint_closed_form_error(cfg, cfg.grid.n_steps)?,
            adjoint_closed_form_error(cfg, 2 * cfg.grid.n_steps)?,
        ))
    })?;
    crit.push(Criterion {
        id: 6,
        name: "first adjoint closed form".into(),
        passed: e_coarse <= tol.adjoint_closed_form && e_fine <= tol.adjoint_closed_form_refined,
        detail: format!("worst relative L2 error {e_coarse:.3e} at dt, {e_fine:.3e} at dt/2"),
    });

    let (value, exact, sym, bil) = timed("second adjoint closed form", times, || second_adjoint_closed_form(cfg))?;
    let rel = (value - exact).abs() / exact;
    crit.push(Criterion {
        id: 7,
        name: "second adjoint closed form".into(),
        passed: rel <= tol.second_adjoint_closed_form && sym == 0.0 && bil <= 1e-12 * exact,
        detail: format!(
            "form {value:.6} vs {exact:.6} (relative {rel:.2e}; {:.2e} from 0.069475), symmetry defect {sym:e}, bilinearity defect {bil:.1e}",
            (value - 0.069475).abs() / 0.069475
        ),
    });

    let model = cfg.model().map_err(numerical("flow estimates"))?;
    let reports = timed("flow estimates", times, || {
        commands::flow_reports(cfg, &model, &cfg.base_control(), &grid)
    })?;
    out.write_csv("c08_flow_estimates.csv", &commands::flow_table(&reports))?;
    let (ok, detail) = commands::flow_verdict(&reports, tol.flow_bound);
    crit.push(Criterion {
        id: 8,
        name: "flow estimates".into(),
        passed: ok,
        detail,
    });

    let fd: Vec<(f64, f64)> = coarse
        .iter()
        .map(|r| (r.epsilon, r.final_duality.expect("requested").gap.mean.abs()))
        .collect();
    let fit = rate_estimate(&fd).map_err(numerical("final duality fit"))?;
    let fd_rows: Vec<_> = coarse
        .iter()
        .map(|r| {
            let c = r.final_duality.expect("requested");
            spde_smp::smp::FinalDualityRow {
                epsilon: r.epsilon,
                comparison: c,
                gap_over_epsilon: c.gap.mean / r.epsilon,
            }
        })
        .collect();
    out.write_csv("c09_final_duality.csv", &commands::final_duality_table(&fd_rows))?;
    crit.push(Criterion {
        id: 9,
        name: "final duality".into(),
        passed: fit.slope > tol.final_duality_slope_min,
        detail: format!("slope {:.4} (r2 {:.3})", fit.slope, fit.r2),
    });

    let mp = timed("maximum principle", times, || commands::run_check_mp(cfg, out, "c10_"))?;
    crit.push(Criterion::from_check(10, commands::mp_check(cfg, &mp)));

    let entries = timed("stochastic integral bound", times, || {
        commands::run_bdg(cfg, out, "c11_")
    })?;
    crit.push(Criterion::from_check(11, commands::bdg_check(cfg, &entries)));

    let (dev, pointwise, leak) = timed("single-mode oracle", times, || single_mode_deviation(cfg))?;
    crit.push(Criterion {
        id: 12,
        name: "single-mode oracle".into(),
        passed: dev <= tol.single_mode && leak <= tol.single_mode,
        detail: format!(
            "worst pathwise relative deviation {dev:.2e} (pointwise {pointwise:.2e}), largest higher mode {leak:.1e}"
        ),
    });

    out.write_csv("criteria.csv", &criteria_table(&crit))?;
    Ok(crit)
}

fn criteria_table(crit: &[Criterion]) -> Table {
    let mut t = Table::new(
        "Acceptance criteria outcomes",
        &[
            ("id", "criterion number"),
            ("name", "criterion"),
            ("passed", "true when the gate holds"),
            ("detail", "measured quantities"),
        ],
    );
    for c in crit {
        t.push(vec![
            cell(c.id),
            c.name.clone(),
            cell(c.passed),
            format!("\"{}\"", c.detail.replace('"', "'")),
        ]);
    }
    t
}

fn suite_run(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<Criterion>, RunManifest)> {
    let start = Instant::now();
    let mut w = ArtifactWriter::create(dir)?;
    let mut times = Vec::new();
    let crit = run_suite(cfg, &mut w, &mut times)?;
    let mut checks: Vec<Check> = crit
        .iter()
        .map(|c| Check::new(c.name.clone(), c.passed, c.detail.clone()))
        .collect();
    checks.extend(
        times
            .iter()
            .map(|(label, s)| Check::new(format!("time: {label}"), true, format!("{s:.1} s"))),
    );
    let m = w.finish(ManifestInfo {
        command: "accept".into(),
        config: cfg.to_toml(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        checks,
    })?;
    Ok((crit, m))
}

fn manifest_entry(out: &Path, run: &str) -> Result<crate::artifacts::FileEntry> {
    let bytes = std::fs::read(out.join(run).join(MANIFEST))?;
    Ok(crate::artifacts::FileEntry {
        path: MANIFEST.into(),
        bytes: bytes.len() as u64,
        sha256: crate::artifacts::sha256_hex(&bytes),
    })
}

/// Runs the suite twice, the second time on a pool with one more worker, and
/// compares the two artifact inventories.
pub fn run_accept(cfg: &ExperimentConfig, out: &Path) -> Result<AcceptOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (mut crit, first) = suite_run(cfg, &out.join("run1"))?;
    let workers = rayon::current_num_threads() + 1;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    let (_, second) = pool.install(|| suite_run(cfg, &out.join("run2")))?;
    let (a, b) = (first.checksums(), second.checksums());
    let differing: Vec<&String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
    crit.push(Criterion {
        id: 13,
        name: "determinism".into(),
        passed: !a.is_empty() && differing.is_empty(),
        detail: if differing.is_empty() {
            format!(
                "{} artifacts byte-identical across two runs ({workers} workers on the second)",
                a.len()
            )
        } else {
            format!("differing artifacts: {differing:?}")
        },
    });

    let mut w = ArtifactWriter::create(out)?;
    w.include("run1", &first.files);
    w.include("run1", &[manifest_entry(out, "run1")?]);
    w.include("run2", &second.files);
    w.include("run2", &[manifest_entry(out, "run2")?]);
    w.write_csv("acceptance.csv", &criteria_table(&crit))?;
    #[derive(Serialize)]
    struct Doc<'a> {
        all_passed: bool,
        criteria: &'a [Criterion],
        runs: [&'a str; 2],
    }
    w.write_json(
        "acceptance.json",
        &Doc {
            all_passed: crit.iter().all(|c| c.passed),
            criteria: &crit,
            runs: [&format!("run1/{MANIFEST}"), &format!("run2/{MANIFEST}")],
        },
    )?;
    let manifest = w.finish(ManifestInfo {
        command: "accept".into(),
        config: cfg.to_toml(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        checks: crit
            .iter()
            .map(|c| Check::new(c.name.clone(), c.passed, c.detail.clone()))
            .collect(),
    })?;
    Ok(AcceptOutcome {
        criteria: crit,
        manifest,
    })
}
