//! Spike variations: the perturbed state `X^ε`, the first and second
//! variation processes `Y^ε`, `Z^ε`, and the expansion statistics built on
//! them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointPath;
use crate::control::{ControlPath, SpikeSpec, SpikeWindow};
use crate::engine::{path_cost, solve_linear, solve_state, solve_state_from, LinearSPDESpec, LinearTerms, StatePath};
use crate::error::{Error, Result};
use crate::model::{Jet, PointFields, ProblemModel};
use crate::spectral::{lp_power_grid, SpectralField};
use crate::stats::{Estimate, MeanAccumulator, ProcessNorm};
use crate::stochastics::{sample_wiener, SeedPolicy, Stream, TimeGrid, WienerPath};

/// Which reading of the first-variation equation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstVariationForm {
    /// Only `δσ_j` forces `Y^ε`.
    #[default]
    Differential,
    /// `δb` also enters the drift of `Y^ε`.
    Mild,
}

/// Coefficient jets along a state path, from knot `offset` to `T`.
#[derive(Debug, Clone)]
pub struct PathDerivatives {
    offset: usize,
    knots: Vec<PointFields>,
    terminal: Vec<Jet>,
}

impl PathDerivatives {
    /// `path.states[0]` sits at knot `offset`.
    pub fn new(model: &ProblemModel, path: &StatePath, grid: &TimeGrid, offset: usize) -> Self {
        let knots = path
            .states
            .iter()
            .zip(&path.controls)
            .enumerate()
            .map(|(i, (x, &u))| model.point_fields(grid.time(offset + i), x.grid_values(), u))
            .collect();
        Self {
            offset,
            knots,
            terminal: model.terminal_fields(path.terminal().grid_values()),
        }
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn at(&self, knot: usize) -> &PointFields {
        &self.knots[knot - self.offset]
    }

    pub fn terminal(&self) -> &[Jet] {
        &self.terminal
    }
}

pub(crate) fn d1(j: &[Jet]) -> Vec<f64> {
    j.iter().map(|j| j.d1).collect()
}

pub(crate) fn d2(j: &[Jet]) -> Vec<f64> {
    j.iter().map(|j| j.d2).collect()
}

/// Linearized dynamics `ā = b'`, `b̄^j = σ_j'` along a path, with optional
/// forcing per absolute knot.
pub struct Tangent<'a> {
    derivs: &'a PathDerivatives,
    alpha: Vec<Option<Vec<f64>>>,
    beta: Vec<Vec<Option<Vec<f64>>>>,
}

impl<'a> Tangent<'a> {
    /// Unforced linearization (the flow `Y^{t,f}`).
    pub fn unforced(derivs: &'a PathDerivatives) -> Self {
        Self {
            derivs,
            alpha: Vec::new(),
            beta: Vec::new(),
        }
    }

    pub fn forced(derivs: &'a PathDerivatives, alpha: Vec<Option<Vec<f64>>>, beta: Vec<Vec<Option<Vec<f64>>>>) -> Self {
        Self { derivs, alpha, beta }
    }
}

impl LinearSPDESpec for Tangent<'_> {
    fn noise_dim(&self) -> usize {
        self.derivs.knots[0].diffusion.len()
    }

    fn terms(&self, knot: usize) -> LinearTerms {
        let f = self.derivs.at(knot);
        LinearTerms {
            a: Some(d1(&f.drift)),
            alpha: self.alpha.get(knot).cloned().flatten(),
            b: f.diffusion.iter().map(|s| Some(d1(s))).collect(),
            beta: self
                .beta
                .get(knot)
                .cloned()
                .unwrap_or_else(|| vec![None; f.diffusion.len()]),
        }
    }
}

/// `δ^ε` fields on one knot of the spike window, evaluated on the base state.
#[derive(Debug, Clone)]
pub struct DeltaFields {
    pub b: Vec<f64>,
    pub b1: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub sigma1: Vec<Vec<f64>>,
    pub l: Vec<f64>,
    pub l1: Vec<f64>,
}

/// `u^ε` realized along `x`: `v` (read on the base state) inside the window,
/// the realized base control elsewhere.
pub fn realized_spike(x: &StatePath, spike: &SpikeSpec, grid: &TimeGrid) -> Result<(SpikeWindow, Vec<f64>)> {
    let window = spike.window(grid)?;
    let mut u = x.controls.clone();
    for (k, uk) in u.iter_mut().enumerate().take(window.end).skip(window.start) {
        *uk = spike.v.value(k, &x.states[k]);
    }
    Ok((window, u))
}

pub fn delta_fields(
    model: &ProblemModel,
    x: &StatePath,
    derivs: &PathDerivatives,
    u_eps: &[f64],
    window: SpikeWindow,
    grid: &TimeGrid,
) -> Vec<DeltaFields> {
    let sub =
        |a: &[Jet], b: &[Jet], f: fn(&Jet) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(a, b)| f(a) - f(b)).collect() };
    (window.start..window.end)
        .map(|k| {
            let base = derivs.at(k);
            let pert = model.point_fields(grid.time(k), x.states[k].grid_values(), u_eps[k]);
            DeltaFields {
                b: sub(&pert.drift, &base.drift, |j| j.value),
                b1: sub(&pert.drift, &base.drift, |j| j.d1),
                sigma: pert
                    .diffusion
                    .iter()
                    .zip(&base.diffusion)
                    .map(|(p, b)| sub(p, b, |j| j.value))
                    .collect(),
                sigma1: pert
                    .diffusion
                    .iter()
                    .zip(&base.diffusion)
                    .map(|(p, b)| sub(p, b, |j| j.d1))
                    .collect(),
                l: sub(&pert.running, &base.running, |j| j.value),
                l1: sub(&pert.running, &base.running, |j| j.d1),
            }
        })
        .collect()
}

fn zeros_before(space_zero: &SpectralField, start: usize, tail: Vec<SpectralField>) -> Vec<SpectralField> {
    let mut out = vec![space_zero.clone(); start];
    out.extend(tail);
    out
}

/// `Y^ε` on every knot (zero up to the window start).
pub fn first_variation(
    derivs: &PathDerivatives,
    deltas: &[DeltaFields],
    window: SpikeWindow,
    w: &WienerPath,
    grid: &TimeGrid,
    form: FirstVariationForm,
    zero: &SpectralField,
) -> Result<Vec<SpectralField>> {
    let n = grid.n_steps();
    let d = w.dim();
    let mut alpha = vec![None; n];
    let mut beta = vec![vec![None; d]; n];
    for (i, df) in deltas.iter().enumerate() {
        let k = window.start + i;
        if form == FirstVariationForm::Mild {
            alpha[k] = Some(df.b.clone());
        }
        beta[k] = df.sigma.iter().cloned().map(Some).collect();
    }
    let spec = Tangent::forced(derivs, alpha, beta);
    let tail = solve_linear(&spec, w, grid, window.start, zero.clone())?;
    Ok(zeros_before(zero, window.start, tail))
}

/// `Z^ε` on every knot, forced by `½b''Y² + δb + δb'Y` and `½σ_j''Y² + δσ_j'Y`.
pub fn second_variation(
    derivs: &PathDerivatives,
    deltas: &[DeltaFields],
    window: SpikeWindow,
    y: &[SpectralField],
    w: &WienerPath,
    grid: &TimeGrid,
    zero: &SpectralField,
) -> Result<Vec<SpectralField>> {
    let n = grid.n_steps();
    let d = w.dim();
    let mut alpha = vec![None; n];
    let mut beta = vec![vec![None; d]; n];
    for k in window.start..n {
        let f = derivs.at(k);
        let yk = y[k].grid_values();
        let mut a: Vec<f64> = f.drift.iter().zip(yk).map(|(j, y)| 0.5 * j.d2 * y * y).collect();
        let mut bs: Vec<Vec<f64>> = f
            .diffusion
            .iter()
            .map(|s| s.iter().zip(yk).map(|(j, y)| 0.5 * j.d2 * y * y).collect())
            .collect();
        if window.contains(k) {
            let df = &deltas[k - window.start];
            for i in 0..a.len() {
                a[i] += df.b[i] + df.b1[i] * yk[i];
            }
            for (b, s1) in bs.iter_mut().zip(&df.sigma1) {
                for i in 0..b.len() {
                    b[i] += s1[i] * yk[i];
                }
            }
        }
        alpha[k] = Some(a);
        beta[k] = bs.into_iter().map(Some).collect();
    }
    let spec = Tangent::forced(derivs, alpha, beta);
    let tail = solve_linear(&spec, w, grid, window.start, zero.clone())?;
    Ok(zeros_before(zero, window.start, tail))
}

/// Everything attached to one spike on one sample, all on shared noise.
#[derive(Debug, Clone)]
pub struct VariationBundle {
    pub window: SpikeWindow,
    pub x: StatePath,
    pub x_eps: StatePath,
    pub u_eps: Vec<f64>,
    pub y: Vec<SpectralField>,
    pub z: Vec<SpectralField>,
    pub deltas: Vec<DeltaFields>,
}

/// Builds the bundle from a base path already simulated on `w`.
pub fn variation_bundle(
    model: &ProblemModel,
    x: &StatePath,
    derivs: &PathDerivatives,
    w: &WienerPath,
    spike: &SpikeSpec,
    grid: &TimeGrid,
    form: FirstVariationForm,
) -> Result<VariationBundle> {
    let (window, u_eps) = realized_spike(x, spike, grid)?;
    let zero = model.space().zero();
    let deltas = delta_fields(model, x, derivs, &u_eps, window, grid);
    let y = first_variation(derivs, &deltas, window, w, grid, form, &zero)?;
    let z = second_variation(derivs, &deltas, window, &y, w, grid, &zero)?;
    let tail = solve_state_from(
        model,
        &ControlPath::Table(u_eps.clone()),
        w,
        grid,
        window.start,
        x.states[window.start].clone(),
    )?;
    let mut states = x.states[..window.start].to_vec();
    states.extend(tail.states);
    let x_eps = StatePath {
        states,
        controls: u_eps.clone(),
        sample_index: x.sample_index,
    };
    Ok(VariationBundle {
        window,
        x: x.clone(),
        x_eps,
        u_eps,
        y,
        z,
        deltas,
    })
}

/// Settings of a dyadic ε sweep around a fixed spike time and action.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub t0: f64,
    pub v: ControlPath,
    pub epsilons: Vec<f64>,
    pub ensemble: usize,
    /// Exponent of the `Y^ε` norm.
    pub p_first: f64,
    pub form: FirstVariationForm,
    /// Window knots sampled per ε for the right side of the final duality;
    /// `None` skips it.
    pub final_duality_knots: Option<usize>,
}

/// Checks `Δt ≤ ε/4` for the smallest ε and that every window fits in `(0, T)`.
pub fn validate_sweep(cfg: &SweepConfig, grid: &TimeGrid) -> Result<()> {
    let min = cfg.epsilons.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = cfg.epsilons.iter().cloned().fold(0.0, f64::max);
    if cfg.epsilons.is_empty() || grid.dt() > min / 4.0 + 1e-15 {
        return Err(Error::Config(format!(
            "time step {} does not resolve the smallest epsilon {min} (need dt <= epsilon/4)",
            grid.dt()
        )));
    }
    if !(cfg.t0 > 0.0 && cfg.t0 + max < grid.horizon()) {
        return Err(Error::Config(format!(
            "spike windows [{}, {}] must lie inside (0, {})",
            cfg.t0,
            cfg.t0 + max,
            grid.horizon()
        )));
    }
    if cfg.ensemble < 2 {
        return Err(Error::Config("sweep ensemble needs at least two samples".into()));
    }
    Ok(())
}

/// A pair of Monte Carlo sides and their (paired) difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub gap: Estimate,
}

#[derive(Debug, Clone, Default)]
struct PairAcc {
    lhs: MeanAccumulator,
    rhs: MeanAccumulator,
    gap: MeanAccumulator,
}

impl PairAcc {
    fn push(&mut self, l: f64, r: f64) {
        self.lhs.push(l);
        self.rhs.push(r);
        self.gap.push(l - r);
    }

    fn finish(&self) -> Comparison {
        Comparison {
            lhs: self.lhs.estimate(),
            rhs: self.rhs.estimate(),
            gap: self.gap.estimate(),
        }
    }
}

/// One row of a sweep table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    /// `|||Y^ε|||_p`.
    pub norm_y: f64,
    /// `|||Z^ε|||_2`.
    pub norm_z: f64,
    /// `sup_t (E‖X^ε − X − Y^ε − Z^ε‖₂²)^{1/2}`.
    pub residual: f64,
    /// `J(u^ε) − J(u)` against the expansion in `δl, Y, Z`.
    pub cost: Comparison,
    /// `J(u^ε) − J(u)` against the Hamiltonian/curvature expansion.
    pub cost_adjoint: Option<Comparison>,
    /// Duality of the first variation with `(p, q)`.
    pub duality_first: Option<Comparison>,
    /// Duality of the second variation with `(p, q)`.
    pub duality_second: Option<Comparison>,
    /// Curvature of `Y^ε` against the second adjoint on the window.
    pub final_duality: Option<Comparison>,
}

#[derive(Debug, Clone)]
struct SampleRecord {
    y_pow: Vec<f64>,
    z_pow: Vec<f64>,
    r_pow: Vec<f64>,
    cost: (f64, f64),
    cost_adjoint: Option<(f64, f64)>,
    duality_first: Option<(f64, f64)>,
    duality_second: Option<(f64, f64)>,
    final_duality: Option<(f64, f64)>,
}

/// Adjoint quantities along one outer path.
pub(crate) struct AdjointAlong {
    pub p_hat: Vec<SpectralField>,
    pub q: Vec<Vec<SpectralField>>,
    pub curvature: Vec<Vec<f64>>,
    pub terminal_curvature: Vec<f64>,
    pub terminal_gradient: Vec<f64>,
}

impl AdjointAlong {
    pub(crate) fn new(adj: &AdjointPath, x: &StatePath, derivs: &PathDerivatives, from: usize) -> Self {
        let n = x.n_steps();
        let mut p_hat = Vec::with_capacity(n - from);
        let mut q = Vec::with_capacity(n - from);
        let mut curvature = Vec::with_capacity(n - from);
        for k in from..n {
            let (ph, qs) = adj.predict(k, &x.states[k]);
            let p = adj.p_from_prediction(k, derivs.at(k), &ph, &qs);
            curvature.push(AdjointPath::curvature_from(derivs.at(k), &p, &qs));
            p_hat.push(ph);
            q.push(qs);
        }
        Self {
            p_hat,
            q,
            curvature,
            terminal_curvature: d2(derivs.terminal()),
            terminal_gradient: d1(derivs.terminal()),
        }
    }
}

/// `Σ_{s≥from} Δt ⟨H̄_s Y_s, Y_s⟩ + ⟨h̄ Y_T, Y_T⟩` for `y` indexed from knot `from`.
pub(crate) fn curvature_functional(
    space_weights: &[f64],
    curvature: &[Vec<f64>],
    curv_offset: usize,
    terminal: &[f64],
    y: &[SpectralField],
    from: usize,
    dt: f64,
) -> f64 {
    let n = from + y.len() - 1;
    let mut total = 0.0;
    for k in from..n {
        let yk = y[k - from].grid_values();
        let h = &curvature[k - curv_offset];
        total += dt * quad_weighted(space_weights, h, yk, yk);
    }
    let yn = y[n - from].grid_values();
    total + quad_weighted(space_weights, terminal, yn, yn)
}

/// `Σ_i w_i h_i (a_i b_i)`, symmetric in `a, b` bit for bit.
pub(crate) fn quad_weighted(w: &[f64], h: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter()
        .zip(h)
        .zip(a.iter().zip(b))
        .map(|((w, h), (a, b))| w * h * (a * b))
        .sum()
}

fn sample_sweep(
    model: &ProblemModel,
    u: &ControlPath,
    seeds: &SeedPolicy,
    grid: &TimeGrid,
    cfg: &SweepConfig,
    adjoint: Option<&AdjointPath>,
    sample: u64,
) -> Result<Vec<SampleRecord>> {
    let space = model.space();
    let wts = space.grid().weights();
    let dt = grid.dt();
    let n = grid.n_steps();
    let w = sample_wiener(seeds, grid, model.noise_dim(), sample);
    let x = solve_state(model, u, &w, grid)?;
    let derivs = PathDerivatives::new(model, &x, grid, 0);
    let base_cost = path_cost(model, &x, grid);
    let first_start = grid.snap(cfg.t0, crate::control::SNAP_TOLERANCE).unwrap_or(0);
    let along = adjoint.map(|a| AdjointAlong::new(a, &x, &derivs, first_start));
    let pow = |f: &SpectralField, p: f64| lp_power_grid(wts, f.grid_values(), p);
    let inner = |a: &[f64], b: &[f64]| -> f64 { wts.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum() };
    let mut out = Vec::with_capacity(cfg.epsilons.len());
    for (ei, &eps) in cfg.epsilons.iter().enumerate() {
        let spike = SpikeSpec::new(cfg.t0, eps, cfg.v.clone());
        let b = variation_bundle(model, &x, &derivs, &w, &spike, grid, cfg.form)?;
        let win = b.window;
        let y_pow: Vec<f64> = b.y.iter().map(|f| pow(f, cfg.p_first)).collect();
        let z_pow: Vec<f64> = b.z.iter().map(|f| pow(f, 2.0)).collect();
        let r_pow: Vec<f64> = (0..=n)
            .map(|k| {
                let r: Vec<f64> = (0..wts.len())
                    .map(|i| {
                        b.x_eps.states[k].grid_values()[i]
                            - x.states[k].grid_values()[i]
                            - b.y[k].grid_values()[i]
                            - b.z[k].grid_values()[i]
                    })
                    .collect();
                lp_power_grid(wts, &r, 2.0)
            })
            .collect();

        let lhs = path_cost(model, &b.x_eps, grid) - base_cost;
        let mut rhs = 0.0;
        let mut dl_total = 0.0;
        for k in win.start..n {
            let f = derivs.at(k);
            let (yk, zk) = (b.y[k].grid_values(), b.z[k].grid_values());
            let l1 = d1(&f.running);
            let l2 = d2(&f.running);
            let mut s = 0.0;
            for i in 0..wts.len() {
                s += wts[i] * (l1[i] * (yk[i] + zk[i]) + 0.5 * l2[i] * yk[i] * yk[i]);
            }
            if win.contains(k) {
                let dl = wts
                    .iter()
                    .zip(&b.deltas[k - win.start].l)
                    .map(|(w, v)| w * v)
                    .sum::<f64>();
                s += dl;
                dl_total += dt * dl;
            }
            rhs += dt * s;
        }
        let term = derivs.terminal();
        let (yn, zn) = (b.y[n].grid_values(), b.z[n].grid_values());
        for i in 0..wts.len() {
            rhs += wts[i] * (term[i].d1 * (yn[i] + zn[i]) + 0.5 * term[i].d2 * yn[i] * yn[i]);
        }

        let mut rec = SampleRecord {
            y_pow,
            z_pow,
            r_pow,
            cost: (lhs, rhs),
            cost_adjoint: None,
            duality_first: None,
            duality_second: None,
            final_duality: None,
        };

        if let Some(al) = &along {
            let off = first_start;
            let mut hamiltonian = dl_total;
            let mut d1_rhs = 0.0;
            for k in win.start..win.end {
                let df = &b.deltas[k - win.start];
                let mut s = inner(al.p_hat[k - off].grid_values(), &df.b);
                for (qj, sj) in al.q[k - off].iter().zip(&df.sigma) {
                    let v = inner(qj.grid_values(), sj);
                    s += v;
                    d1_rhs += dt * v;
                }
                if cfg.form == FirstVariationForm::Mild {
                    d1_rhs += dt * inner(al.p_hat[k - off].grid_values(), &df.b);
                }
                hamiltonian += dt * s;
            }
            let curv = curvature_functional(
                wts,
                &al.curvature,
                off,
                &al.terminal_curvature,
                &b.y[win.start..],
                win.start,
                dt,
            );
            rec.cost_adjoint = Some((lhs, hamiltonian + 0.5 * curv));

            let mut d1_lhs = 0.0;
            let mut d2_lhs = 0.0;
            let mut d2_rhs = 0.0;
            for k in win.start..n {
                let f = derivs.at(k);
                let l1 = d1(&f.running);
                d1_lhs += dt * inner(&l1, b.y[k].grid_values());
                d2_lhs += dt * inner(&l1, b.z[k].grid_values());
                let yk = b.y[k].grid_values();
                let mut alpha: Vec<f64> = f.drift.iter().zip(yk).map(|(j, y)| 0.5 * j.d2 * y * y).collect();
                let mut betas: Vec<Vec<f64>> = f
                    .diffusion
                    .iter()
                    .map(|s| s.iter().zip(yk).map(|(j, y)| 0.5 * j.d2 * y * y).collect())
                    .collect();
                if win.contains(k) {
                    let df = &b.deltas[k - win.start];
                    for i in 0..alpha.len() {
                        alpha[i] += df.b[i] + df.b1[i] * yk[i];
                    }
                    for (bj, s1) in betas.iter_mut().zip(&df.sigma1) {
                        for i in 0..bj.len() {
                            bj[i] += s1[i] * yk[i];
                        }
                    }
                }
                d2_rhs += dt * inner(al.p_hat[k - off].grid_values(), &alpha);
                for (qj, bj) in al.q[k - off].iter().zip(&betas) {
                    d2_rhs += dt * inner(qj.grid_values(), bj);
                }
            }
            d1_lhs += inner(&al.terminal_gradient, b.y[n].grid_values());
            d2_lhs += inner(&al.terminal_gradient, b.z[n].grid_values());
            rec.duality_first = Some((d1_lhs, d1_rhs));
            rec.duality_second = Some((d2_lhs, d2_rhs));

            if let Some(m) = cfg.final_duality_knots {
                let width = win.end - win.start;
                let m = m.clamp(1, width);
                let mut rng = seeds.rng(Stream::Custom(1), sample, ei as u64);
                let mut rhs_fd = 0.0;
                for s in 0..m {
                    let lo = win.start + s * width / m;
                    let hi = win.start + (s + 1) * width / m;
                    let k = rng.gen_range(lo..hi);
                    let weight = (hi - lo) as f64 * dt;
                    let tangent = Tangent::unforced(&derivs);
                    for sj in &b.deltas[k - win.start].sigma {
                        let f0 = space.field_from_grid(sj);
                        let flow = solve_linear(&tangent, &w, grid, k, f0)?;
                        rhs_fd += weight
                            * curvature_functional(wts, &al.curvature, off, &al.terminal_curvature, &flow, k, dt);
                    }
                }
                rec.final_duality = Some((curv, rhs_fd));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Runs the ε sweep over samples `0..ensemble` with shared noise per sample.
pub fn variation_sweep(
    model: &ProblemModel,
    u: &ControlPath,
    seeds: &SeedPolicy,
    grid: &TimeGrid,
    cfg: &SweepConfig,
    adjoint: Option<&AdjointPath>,
) -> Result<Vec<SweepRow>> {
    validate_sweep(cfg, grid)?;
    let n_eps = cfg.epsilons.len();
    let knots = grid.n_steps() + 1;
    let mut ny: Vec<ProcessNorm> = (0..n_eps).map(|_| ProcessNorm::new(cfg.p_first, knots)).collect();
    let mut nz: Vec<ProcessNorm> = (0..n_eps).map(|_| ProcessNorm::new(2.0, knots)).collect();
    let mut nr: Vec<ProcessNorm> = (0..n_eps).map(|_| ProcessNorm::new(2.0, knots)).collect();
    let mut accs: Vec<[PairAcc; 5]> = (0..n_eps).map(|_| Default::default()).collect();
    const CHUNK: usize = 64;
    let mut start = 0;
    while start < cfg.ensemble {
        let end = (start + CHUNK).min(cfg.ensemble);
        let records: Vec<Vec<SampleRecord>> = (start as u64..end as u64)
            .into_par_iter()
            .map(|i| sample_sweep(model, u, seeds, grid, cfg, adjoint, i))
            .collect::<Result<_>>()?;
        for sample in &records {
            for (e, r) in sample.iter().enumerate() {
                ny[e].push(&r.y_pow);
                nz[e].push(&r.z_pow);
                nr[e].push(&r.r_pow);
                accs[e][0].push(r.cost.0, r.cost.1);
                let opt = [r.cost_adjoint, r.duality_first, r.duality_second, r.final_duality];
                for (a, o) in accs[e][1..].iter_mut().zip(opt) {
                    if let Some((l, rr)) = o {
                        a.push(l, rr);
                    }
                }
            }
        }
        start = end;
    }
    let finish = |a: &PairAcc| (a.gap.count() > 0).then(|| a.finish());
    Ok((0..n_eps)
        .map(|e| SweepRow {
            epsilon: cfg.epsilons[e],
            norm_y: ny[e].sup(),
            norm_z: nz[e].sup(),
            residual: nr[e].sup(),
            cost: accs[e][0].finish(),
            cost_adjoint: finish(&accs[e][1]),
            duality_first: finish(&accs[e][2]),
            duality_second: finish(&accs[e][3]),
            final_duality: finish(&accs[e][4]),
        })
        .collect())
}

/// Dyadic sweep `2^{-hi}, …, 2^{-lo}` in increasing order.
pub fn dyadic_epsilons(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).rev().map(|e| 2f64.powi(-e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_scenario, ScenarioParams};
    use crate::spectral::SpectralSpace;

    fn setup(name: &str) -> (ProblemModel, TimeGrid, WienerPath, StatePath) {
        let space = SpectralSpace::new(16).unwrap();
        let model = build_scenario(name, &ScenarioParams::new(), &space, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let w = sample_wiener(&SeedPolicy::new(5), &grid, model.noise_dim(), 0);
        let x = solve_state(&model, &ControlPath::Constant(-1.0), &w, &grid).unwrap();
        (model, grid, w, x)
    }

    #[test]
    fn null_spike_gives_zero_variations() {
        let (model, grid, w, x) = setup("nonconvex-sigma");
        let derivs = PathDerivatives::new(&model, &x, &grid, 0);
        let spike = SpikeSpec::new(0.25, 0.25, ControlPath::Constant(-1.0));
        let b = variation_bundle(&model, &x, &derivs, &w, &spike, &grid, FirstVariationForm::Differential).unwrap();
        assert!(b.y.iter().chain(&b.z).all(|f| f.modes().iter().all(|&c| c == 0.0)));
        assert_eq!(b.x_eps.states, x.states);
    }

    #[test]
    fn deltas_vanish_off_window_and_variations_vanish_before_it() {
        let (model, grid, w, x) = setup("nonconvex-sigma");
        let derivs = PathDerivatives::new(&model, &x, &grid, 0);
        let spike = SpikeSpec::new(0.25, 0.125, ControlPath::Constant(1.0));
        let b = variation_bundle(&model, &x, &derivs, &w, &spike, &grid, FirstVariationForm::Differential).unwrap();
        assert_eq!((b.window.start, b.window.end), (16, 24));
        assert_eq!(b.deltas.len(), 8);
        for k in 0..=16 {
            assert!(b.y[k].modes().iter().all(|&c| c == 0.0));
            assert!(b.z[k].modes().iter().all(|&c| c == 0.0));
        }
        assert!(b.y[17].modes().iter().any(|&c| c != 0.0));
        for k in 0..64 {
            assert_eq!(b.u_eps[k] != x.controls[k], b.window.contains(k));
        }
    }

    #[test]
    fn affine_dynamics_have_no_expansion_residual() {
        // b, σ affine in r with u-independent slopes: X^ε − X = Y^ε + Z^ε exactly.
        let (model, grid, w, _) = setup("lq");
        let x = solve_state(&model, &ControlPath::Constant(0.0), &w, &grid).unwrap();
        let derivs = PathDerivatives::new(&model, &x, &grid, 0);
        let spike = SpikeSpec::new(0.25, 0.25, ControlPath::Constant(1.0));
        let b = variation_bundle(&model, &x, &derivs, &w, &spike, &grid, FirstVariationForm::Differential).unwrap();
        for k in 0..=64 {
            let r = b.x_eps.states[k]
                .axpy(-1.0, &x.states[k])
                .unwrap()
                .axpy(-1.0, &b.y[k])
                .unwrap()
                .axpy(-1.0, &b.z[k])
                .unwrap();
            assert!(r.lp_norm(2.0).unwrap() < 1e-13, "knot {k}");
        }
    }

    #[test]
    fn second_variation_matches_direct_linear_solve_for_affine_dynamics() {
        let (model, grid, w, _) = setup("lq");
        let x = solve_state(&model, &ControlPath::Constant(0.0), &w, &grid).unwrap();
        let derivs = PathDerivatives::new(&model, &x, &grid, 0);
        let spike = SpikeSpec::new(0.5, 0.125, ControlPath::Constant(-1.0));
        let b = variation_bundle(&model, &x, &derivs, &w, &spike, &grid, FirstVariationForm::Differential).unwrap();
        let mut alpha = vec![None; 64];
        for (a, d) in alpha[b.window.start..b.window.end].iter_mut().zip(&b.deltas) {
            *a = Some(d.b.clone());
        }
        let spec = Tangent::forced(&derivs, alpha, Vec::new());
        let direct = solve_linear(&spec, &w, &grid, 0, model.space().zero()).unwrap();
        for (a, c) in direct.iter().zip(&b.z) {
            for (u, v) in a.modes().iter().zip(c.modes()) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sweep_rejects_unresolved_epsilons() {
        let space = SpectralSpace::new(8).unwrap();
        let model = build_scenario("nonconvex-sigma", &ScenarioParams::new(), &space, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let cfg = SweepConfig {
            t0: 0.5,
            v: ControlPath::Constant(1.0),
            epsilons: dyadic_epsilons(2, 5),
            ensemble: 4,
            p_first: 4.0,
            form: FirstVariationForm::Differential,
            final_duality_knots: None,
        };
        assert!(variation_sweep(
            &model,
            &ControlPath::Constant(-1.0),
            &SeedPolicy::new(1),
            &grid,
            &cfg,
            None
        )
        .is_err());
        let ok = SweepConfig {
            epsilons: dyadic_epsilons(2, 4),
            ..cfg
        };
        let rows = variation_sweep(
            &model,
            &ControlPath::Constant(-1.0),
            &SeedPolicy::new(1),
            &grid,
            &ok,
            None,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].epsilon < rows[2].epsilon);
    }

    #[test]
    fn sweep_with_null_spike_is_identically_zero() {
        let space = SpectralSpace::new(8).unwrap();
        let model = build_scenario("nonconvex-sigma", &ScenarioParams::new(), &space, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let cfg = SweepConfig {
            t0: 0.5,
            v: ControlPath::Constant(-1.0),
            epsilons: dyadic_epsilons(2, 4),
            ensemble: 4,
            p_first: 4.0,
            form: FirstVariationForm::Differential,
            final_duality_knots: None,
        };
        let rows = variation_sweep(
            &model,
            &ControlPath::Constant(-1.0),
            &SeedPolicy::new(1),
            &grid,
            &cfg,
            None,
        )
        .unwrap();
        for r in rows {
            assert_eq!((r.norm_y, r.norm_z, r.residual), (0.0, 0.0, 0.0));
            assert_eq!((r.cost.lhs.mean, r.cost.rhs.mean), (0.0, 0.0));
        }
    }
}
