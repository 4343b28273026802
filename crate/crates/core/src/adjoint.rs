//! First adjoint pair `(p, q)` by a regression-based backward sweep, the
//! curvature fields `H̄, h̄`, and the second adjoint as a bilinear-form
//! evaluator over branched futures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlPath;
use crate::engine::{solve_linear, solve_state, solve_state_from, StatePath};
use crate::error::{check_param, Error, Result};
use crate::model::{PointFields, ProblemModel};
use crate::regression::{BasisSpec, RegressionFit};
use crate::spectral::{lp_power_grid, PowerSign, SpectralField};
use crate::stats::{Estimate, MeanAccumulator};
use crate::stochastics::{branch, sample_wiener, splice, SeedPolicy, Stream, TimeGrid, WienerPath};
use crate::variation::{d1, d2, quad_weighted, PathDerivatives, Tangent};

#[derive(Debug, Clone)]
struct KnotFit {
    p_hat: RegressionFit,
    q: RegressionFit,
}

/// Per-knot summary of the backward sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjointKnotDiagnostics {
    pub t: f64,
    /// `E‖p_t‖₂²`.
    pub p_norm2: f64,
    /// `Σ_j E‖q_t^j‖₂²`.
    pub q_norm2: f64,
    /// `E‖H̄_t‖₂²`.
    pub hbar_norm2: f64,
    /// Largest regression standard error over the `q` outputs.
    pub q_se_max: f64,
    pub ridge: Option<f64>,
}

/// Time-discretized adjoint pair, stored as regression functions of the state.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    model: ProblemModel,
    grid: TimeGrid,
    fits: Vec<KnotFit>,
    pub diagnostics: Vec<AdjointKnotDiagnostics>,
}

/// Backward sweep over an ensemble simulated under the candidate control.
///
/// With `S = e^{ΔtA}` and `E_k` the regression estimate of the conditional
/// expectation given `X_{t_k}`:
/// `p̂_k = E_k[S p_{k+1}]`, `q_k^j = E_k[(S p_{k+1} − p̂_k) ΔW_k^j] / Δt`,
/// `p_k = p̂_k (1 + b'_k Δt) + Σ_j σ_j'_k q_k^j Δt + l'_k Δt`, `p_n = h'(X_T)`.
pub fn solve_first_adjoint(
    model: &ProblemModel,
    paths: &[(WienerPath, StatePath)],
    grid: &TimeGrid,
    basis: BasisSpec,
) -> Result<AdjointPath> {
    check_param(
        "ensemble",
        paths.len() as f64,
        paths.len() >= 2,
        "need at least two paths",
    )?;
    let n = grid.n_steps();
    if paths.iter().any(|(w, x)| w.n_steps() != n || x.n_steps() != n) {
        return Err(Error::Config("paths do not match the time grid".into()));
    }
    let space = model.space().clone();
    let wts = space.grid().weights().to_vec();
    let nm = space.n_modes();
    let d = model.noise_dim();
    let dt = grid.dt();
    let decay = space.laplacian().decay_factors(dt);

    let mut p_next: Vec<Vec<f64>> = paths
        .par_iter()
        .map(|(_, x)| space.to_modes(&d1(&model.terminal_fields(x.terminal().grid_values()))))
        .collect();
    let mut fits = Vec::with_capacity(n);
    let mut diagnostics = Vec::with_capacity(n + 1);
    let terminal_p2: f64 =
        p_next.iter().map(|m| m.iter().map(|c| c * c).sum::<f64>()).sum::<f64>() / paths.len() as f64;
    let terminal_h2 = paths
        .iter()
        .map(|(_, x)| lp_power_grid(&wts, &d2(&model.terminal_fields(x.terminal().grid_values())), 2.0))
        .sum::<f64>()
        / paths.len() as f64;
    diagnostics.push(AdjointKnotDiagnostics {
        t: grid.horizon(),
        p_norm2: terminal_p2,
        q_norm2: 0.0,
        hbar_norm2: terminal_h2,
        q_se_max: 0.0,
        ridge: None,
    });

    for k in (0..n).rev() {
        let inputs: Vec<&[f64]> = paths.iter().map(|(_, x)| x.states[k].modes()).collect();
        let sp: Vec<Vec<f64>> = p_next
            .iter()
            .map(|m| m.iter().zip(&decay).map(|(c, e)| c * e).collect())
            .collect();
        let sp_ref: Vec<&[f64]> = sp.iter().map(|v| v.as_slice()).collect();
        let p_fit = RegressionFit::fit(basis, &inputs, &sp_ref);
        let q_resp: Vec<Vec<f64>> = paths
            .iter()
            .zip(&sp)
            .zip(&inputs)
            .map(|(((w, _), spi), x)| {
                let ph = p_fit.evaluate(x);
                let dw = w.increment(k);
                let mut out = Vec::with_capacity(nm * d);
                for dwj in dw {
                    out.extend(spi.iter().zip(&ph).map(|(a, b)| (a - b) * dwj / dt));
                }
                out
            })
            .collect();
        let q_ref: Vec<&[f64]> = q_resp.iter().map(|v| v.as_slice()).collect();
        let q_fit = RegressionFit::fit(basis, &inputs, &q_ref);
        let fit = KnotFit { p_hat: p_fit, q: q_fit };
        let t = grid.time(k);
        let per_sample: Vec<(Vec<f64>, f64, f64)> = paths
            .par_iter()
            .map(|(_, x)| {
                let xk = &x.states[k];
                let fields = model.point_fields(t, xk.grid_values(), x.controls[k]);
                let (ph, qs) = predict_with(&fit, model, xk);
                let p = p_grid(&fields, &ph, &qs, dt);
                let h = curvature_grid(&fields, &p, &qs);
                let q2: f64 = qs.iter().map(|q| q.modes().iter().map(|c| c * c).sum::<f64>()).sum();
                (space.to_modes(&p), q2, lp_power_grid(&wts, &h, 2.0))
            })
            .collect();
        let m = paths.len() as f64;
        let mut p2 = 0.0;
        let mut q2 = 0.0;
        let mut h2 = 0.0;
        for (i, (pm, q, h)) in per_sample.into_iter().enumerate() {
            p2 += pm.iter().map(|c| c * c).sum::<f64>();
            q2 += q;
            h2 += h;
            p_next[i] = pm;
        }
        diagnostics.push(AdjointKnotDiagnostics {
            t,
            p_norm2: p2 / m,
            q_norm2: q2 / m,
            hbar_norm2: h2 / m,
            q_se_max: fit.q.output_se.iter().cloned().fold(0.0, f64::max),
            ridge: fit.p_hat.ridge.or(fit.q.ridge),
        });
        fits.push(fit);
    }
    fits.reverse();
    diagnostics.reverse();
    Ok(AdjointPath {
        model: model.clone(),
        grid: *grid,
        fits,
        diagnostics,
    })
}

fn predict_with(fit: &KnotFit, model: &ProblemModel, x: &SpectralField) -> (SpectralField, Vec<SpectralField>) {
    let space = model.space();
    let nm = space.n_modes();
    let ph = space.field_from_modes(fit.p_hat.evaluate(x.modes()));
    let q_all = fit.q.evaluate(x.modes());
    let qs = q_all.chunks(nm).map(|c| space.field_from_modes(c.to_vec())).collect();
    (ph, qs)
}

/// Grid values of `p̂(1 + b'Δt) + Σ_j σ_j' q^j Δt + l'Δt`.
fn p_grid(fields: &PointFields, p_hat: &SpectralField, q: &[SpectralField], dt: f64) -> Vec<f64> {
    let ph = p_hat.grid_values();
    let mut out: Vec<f64> = (0..ph.len())
        .map(|i| ph[i] * (1.0 + fields.drift[i].d1 * dt) + fields.running[i].d1 * dt)
        .collect();
    for (qj, sj) in q.iter().zip(&fields.diffusion) {
        for (o, (qv, s)) in out.iter_mut().zip(qj.grid_values().iter().zip(sj)) {
            *o += s.d1 * qv * dt;
        }
    }
    out
}

/// `H̄ = l'' + p b'' + Σ_j q^j σ_j''` on the grid.
fn curvature_grid(fields: &PointFields, p: &[f64], q: &[SpectralField]) -> Vec<f64> {
    let mut h: Vec<f64> = (0..p.len())
        .map(|i| fields.running[i].d2 + p[i] * fields.drift[i].d2)
        .collect();
    for (qj, sj) in q.iter().zip(&fields.diffusion) {
        for (o, (qv, s)) in h.iter_mut().zip(qj.grid_values().iter().zip(sj)) {
            *o += qv * s.d2;
        }
    }
    h
}

fn has_state_curvature(fields: &PointFields) -> bool {
    fields.drift.iter().any(|j| j.d2 != 0.0) || fields.diffusion.iter().flatten().any(|j| j.d2 != 0.0)
}

/// Curvature fields along one path.
#[derive(Debug, Clone)]
pub struct CurvatureFields {
    /// `H̄_{t_k}` grid values for `k = offset..n`.
    pub hbar: Vec<Vec<f64>>,
    pub offset: usize,
    /// `h̄ = h''(X_T)` grid values.
    pub terminal: Vec<f64>,
}

impl AdjointPath {
    pub fn model(&self) -> &ProblemModel {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Whether some knot needed the ridge fallback.
    pub fn used_ridge(&self) -> bool {
        self.diagnostics.iter().any(|d| d.ridge.is_some())
    }

    /// `(p̂_k, q_k)` as functions of `X_{t_k}`, for `k < n`.
    pub fn predict(&self, k: usize, x: &SpectralField) -> (SpectralField, Vec<SpectralField>) {
        predict_with(&self.fits[k], &self.model, x)
    }

    /// Regression standard errors of the `q` outputs at knot `k`.
    pub fn q_standard_errors(&self, k: usize) -> &[f64] {
        &self.fits[k].q.output_se
    }

    pub(crate) fn p_from_prediction(
        &self,
        _k: usize,
        fields: &PointFields,
        p_hat: &SpectralField,
        q: &[SpectralField],
    ) -> SpectralField {
        self.model
            .space()
            .field_from_grid(&p_grid(fields, p_hat, q, self.grid.dt()))
    }

    pub(crate) fn curvature_from(fields: &PointFields, p: &SpectralField, q: &[SpectralField]) -> Vec<f64> {
        curvature_grid(fields, p.grid_values(), q)
    }

    /// `(p_k, q_k)` at state `x` under action `u`; at `k = n` this is `(h'(X_T), 0)`.
    pub fn p_q(&self, k: usize, x: &SpectralField, u: f64) -> (SpectralField, Vec<SpectralField>) {
        let space = self.model.space();
        let n = self.grid.n_steps();
        if k == n {
            let p = space.field_from_grid(&d1(&self.model.terminal_fields(x.grid_values())));
            return (p, vec![space.zero(); self.model.noise_dim()]);
        }
        let fields = self.model.point_fields(self.grid.time(k), x.grid_values(), u);
        let (ph, qs) = self.predict(k, x);
        (self.p_from_prediction(k, &fields, &ph, &qs), qs)
    }

    /// `H̄` and `h̄` along a path whose first state sits at knot `offset`.
    pub fn curvature(&self, path: &StatePath, offset: usize) -> CurvatureFields {
        let derivs = PathDerivatives::new(&self.model, path, &self.grid, offset);
        self.curvature_along(path, &derivs)
    }

    fn curvature_along(&self, path: &StatePath, derivs: &PathDerivatives) -> CurvatureFields {
        let offset = derivs.offset();
        let n = self.grid.n_steps();
        let hbar = (offset..n)
            .map(|k| {
                let f = derivs.at(k);
                if has_state_curvature(f) {
                    let x = &path.states[k - offset];
                    let (ph, qs) = self.predict(k, x);
                    let p = self.p_from_prediction(k, f, &ph, &qs);
                    curvature_grid(f, p.grid_values(), &qs)
                } else {
                    d2(&f.running)
                }
            })
            .collect();
        CurvatureFields {
            hbar,
            offset,
            terminal: d2(derivs.terminal()),
        }
    }
}

/// Matrix of form values `⟨P f_a, f_b⟩` with standard errors over branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormGram {
    pub mean: Vec<Vec<f64>>,
    pub std_error: Vec<Vec<f64>>,
}

/// Per-branch Gram matrix `Q_ab = Σ_s Δt⟨H̄_s Y^a_s, Y^b_s⟩ + ⟨h̄ Y^a_T, Y^b_T⟩`
/// along the future `w` from `x_k` at `knot`.
fn branch_gram(
    adjoint: &AdjointPath,
    control: &ControlPath,
    w: &WienerPath,
    knot: usize,
    x_k: &SpectralField,
    fs: &[SpectralField],
) -> Result<Vec<f64>> {
    let model = &adjoint.model;
    let grid = &adjoint.grid;
    let xb = solve_state_from(model, control, w, grid, knot, x_k.clone())?;
    let derivs = PathDerivatives::new(model, &xb, grid, knot);
    let curv = adjoint.curvature_along(&xb, &derivs);
    let tangent = Tangent::unforced(&derivs);
    let flows: Vec<Vec<SpectralField>> = fs
        .iter()
        .map(|f| solve_linear(&tangent, w, grid, knot, f.clone()))
        .collect::<Result<_>>()?;
    let wts = model.space().grid().weights();
    let dt = grid.dt();
    let n = grid.n_steps();
    let m = fs.len();
    let mut q = vec![0.0; m * m];
    for a in 0..m {
        for b in a..m {
            let mut s = 0.0;
            for k in knot..n {
                let i = k - knot;
                s += dt * quad_weighted(wts, &curv.hbar[i], flows[a][i].grid_values(), flows[b][i].grid_values());
            }
            let i = n - knot;
            s += quad_weighted(
                wts,
                &curv.terminal,
                flows[a][i].grid_values(),
                flows[b][i].grid_values(),
            );
            q[a * m + b] = s;
            q[b * m + a] = s;
        }
    }
    Ok(q)
}

fn reduce_grams(per_branch: &[Vec<f64>], m: usize) -> FormGram {
    let mut mean = vec![vec![0.0; m]; m];
    let mut se = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in 0..m {
            let acc: MeanAccumulator = per_branch.iter().map(|q| q[a * m + b]).collect();
            mean[a][b] = acc.mean();
            se[a][b] = acc.std_error();
        }
    }
    FormGram { mean, std_error: se }
}

/// `⟨P_{t_k} f, g⟩` conditional on one outer path prefix, estimated over
/// `M` branched futures that are shared by every evaluation.
pub struct SecondAdjointForm<'a> {
    adjoint: &'a AdjointPath,
    control: &'a ControlPath,
    seeds: SeedPolicy,
    outer: &'a WienerPath,
    knot: usize,
    x_k: SpectralField,
    branches: usize,
}

impl<'a> SecondAdjointForm<'a> {
    pub fn new(
        adjoint: &'a AdjointPath,
        control: &'a ControlPath,
        seeds: SeedPolicy,
        outer: &'a WienerPath,
        knot: usize,
        x_k: SpectralField,
        branches: usize,
    ) -> Result<Self> {
        check_param(
            "branches",
            branches as f64,
            branches >= 2,
            "need at least two inner branches",
        )?;
        let n = adjoint.grid.n_steps();
        if knot > n {
            return Err(Error::KnotOutOfRange {
                index: knot,
                n_steps: n,
            });
        }
        Ok(Self {
            adjoint,
            control,
            seeds,
            outer,
            knot,
            x_k,
            branches,
        })
    }

    pub fn knot(&self) -> usize {
        self.knot
    }

    pub fn outer_sample(&self) -> u64 {
        self.outer.sample_index()
    }

    /// Per-branch Gram matrices, flattened row-major.
    pub fn branch_grams(&self, fs: &[SpectralField]) -> Result<Vec<Vec<f64>>> {
        (0..self.branches as u64)
            .into_par_iter()
            .map(|b| {
                let w = branch(self.outer, self.knot, &self.seeds, b)?;
                branch_gram(self.adjoint, self.control, &w, self.knot, &self.x_k, fs)
            })
            .collect()
    }

    pub fn gram(&self, fs: &[SpectralField]) -> Result<FormGram> {
        Ok(reduce_grams(&self.branch_grams(fs)?, fs.len()))
    }

    /// `Σ_a ⟨P f_a, f_a⟩` with its standard error over branches.
    pub fn trace(&self, fs: &[SpectralField]) -> Result<Estimate> {
        let m = fs.len();
        let acc: MeanAccumulator = self
            .branch_grams(fs)?
            .iter()
            .map(|q| (0..m).map(|a| q[a * m + a]).sum::<f64>())
            .collect();
        Ok(acc.estimate())
    }

    pub fn eval(&self, f: &SpectralField, g: &SpectralField) -> Result<Estimate> {
        let gram = self.gram(&[f.clone(), g.clone()])?;
        Ok(Estimate {
            mean: gram.mean[0][1],
            std_error: gram.std_error[0][1],
        })
    }
}

/// Both sides of an identity estimated by Monte Carlo and their paired gap.
pub use crate::variation::Comparison;

/// Checks `E⟨p_{t_k}, f⟩ = E[⟨h'(X_T), Y_T^{k,f}⟩ + Σ_{s≥k} Δt ⟨l'_s, Y_s^{k,f}⟩]`
/// on fresh samples `first..first+n`.
pub fn adjoint_representation_check(
    adjoint: &AdjointPath,
    control: &ControlPath,
    seeds: &SeedPolicy,
    knot: usize,
    f: &SpectralField,
    first: u64,
    n: usize,
) -> Result<Comparison> {
    let model = &adjoint.model;
    let grid = &adjoint.grid;
    let wts = model.space().grid().weights();
    let dt = grid.dt();
    let nn = grid.n_steps();
    let pairs: Vec<(f64, f64)> = (first..first + n as u64)
        .into_par_iter()
        .map(|i| {
            let w = sample_wiener(seeds, grid, model.noise_dim(), i);
            let x = solve_state(model, control, &w, grid)?;
            let (p, _) = adjoint.p_q(knot, &x.states[knot], x.controls.get(knot).copied().unwrap_or(0.0));
            let lhs = p.inner(f)?;
            let tail = StatePath {
                states: x.states[knot..].to_vec(),
                controls: x.controls[knot..].to_vec(),
                sample_index: i,
            };
            let derivs = PathDerivatives::new(model, &tail, grid, knot);
            let flow = solve_linear(&Tangent::unforced(&derivs), &w, grid, knot, f.clone())?;
            let mut rhs = 0.0;
            for k in knot..nn {
                let l1 = d1(&derivs.at(k).running);
                rhs += dt * quad_weighted(wts, &vec![1.0; wts.len()], &l1, flow[k - knot].grid_values());
            }
            rhs += quad_weighted(
                wts,
                &vec![1.0; wts.len()],
                &d1(derivs.terminal()),
                flow[nn - knot].grid_values(),
            );
            Ok((lhs, rhs))
        })
        .collect::<Result<_>>()?;
    let mut acc = [
        MeanAccumulator::default(),
        MeanAccumulator::default(),
        MeanAccumulator::default(),
    ];
    for (l, r) in pairs {
        acc[0].push(l);
        acc[1].push(r);
        acc[2].push(l - r);
    }
    Ok(Comparison {
        lhs: acc[0].estimate(),
        rhs: acc[1].estimate(),
        gap: acc[2].estimate(),
    })
}

/// One lag row of the flow-estimate check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowRow {
    pub lag: f64,
    /// `max_f (E‖Y_s^{t,f}‖₄⁴)^{1/4} / ‖f‖₄`.
    pub ratio: f64,
    /// `max_f (s−t)^η (E‖Y_s^{t,(−A)^η f}‖₄⁴)^{1/4} / ‖f‖₄`, one per η.
    pub weighted: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowReport {
    pub knot: usize,
    pub etas: Vec<f64>,
    pub rows: Vec<FlowRow>,
}

/// Random test fields with independent standard normal modes.
pub fn random_fields(
    space: &std::sync::Arc<crate::spectral::SpectralSpace>,
    seeds: &SeedPolicy,
    count: usize,
) -> Vec<SpectralField> {
    use rand_distr::{Distribution, StandardNormal};
    (0..count as u64)
        .map(|i| {
            let mut rng = seeds.rng(Stream::Field, i, 0);
            let modes = (0..space.n_modes()).map(|_| StandardNormal.sample(&mut rng)).collect();
            space.field_from_modes(modes)
        })
        .collect()
}

/// Moments of the linearized flow `Y^{t,f}` from `X_{t_k}` of outer sample
/// `outer`, over `branches` conditional futures.
#[allow(clippy::too_many_arguments)]
pub fn flow_estimates_check(
    model: &ProblemModel,
    control: &ControlPath,
    seeds: &SeedPolicy,
    grid: &TimeGrid,
    knot: usize,
    outer: u64,
    fs: &[SpectralField],
    etas: &[f64],
    branches: usize,
) -> Result<FlowReport> {
    check_param(
        "branches",
        branches as f64,
        branches >= 2,
        "need at least two inner branches",
    )?;
    let n = grid.n_steps();
    if knot >= n {
        return Err(Error::KnotOutOfRange {
            index: knot,
            n_steps: n,
        });
    }
    let wts = model.space().grid().weights();
    let w0 = sample_wiener(seeds, grid, model.noise_dim(), outer);
    let x0 = solve_state(model, control, &w0, grid)?;
    let x_k = x0.states[knot].clone();
    // Initial data: every f, then every (−A)^η f.
    let mut inits = fs.to_vec();
    for &eta in etas {
        for f in fs {
            inits.push(f.apply_fractional_power(eta, PowerSign::Positive)?);
        }
    }
    let lags = n - knot;
    let per_branch: Vec<Vec<f64>> = (0..branches as u64)
        .into_par_iter()
        .map(|b| {
            let w = branch(&w0, knot, seeds, b)?;
            let xb = solve_state_from(model, control, &w, grid, knot, x_k.clone())?;
            let derivs = PathDerivatives::new(model, &xb, grid, knot);
            let tangent = Tangent::unforced(&derivs);
            let mut out = Vec::with_capacity(inits.len() * lags);
            for f in &inits {
                let flow = solve_linear(&tangent, &w, grid, knot, f.clone())?;
                out.extend(flow[1..].iter().map(|y| lp_power_grid(wts, y.grid_values(), 4.0)));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let nf = fs.len();
    let norms: Vec<f64> = fs
        .iter()
        .map(|f| lp_power_grid(wts, f.grid_values(), 4.0).powf(0.25))
        .collect();
    let moment = |init: usize, lag: usize| -> f64 {
        let s: f64 = per_branch.iter().map(|v| v[init * lags + lag]).sum();
        (s / branches as f64).powf(0.25)
    };
    let rows = (0..lags)
        .map(|l| {
            let tau = (l + 1) as f64 * grid.dt();
            let ratio = (0..nf).map(|i| moment(i, l) / norms[i]).fold(0.0, f64::max);
            let weighted = etas
                .iter()
                .enumerate()
                .map(|(e, eta)| {
                    (0..nf)
                        .map(|i| tau.powf(*eta) * moment(nf * (e + 1) + i, l) / norms[i])
                        .fold(0.0, f64::max)
                })
                .collect();
            FlowRow {
                lag: tau,
                ratio,
                weighted,
            }
        })
        .collect();
    Ok(FlowReport {
        knot,
        etas: etas.to_vec(),
        rows,
    })
}

/// Field-valued functional of the state at the conditioning knot.
pub type StateFunctional<'a> = &'a (dyn Fn(&SpectralField) -> SpectralField + Sync);

/// `E⟨P_{t_k} F, G⟩` for `F_{t_k}`-measurable `F = φ(X_{t_k})`, `G = γ(X_{t_k})`:
/// per-outer-sample form evaluation (lhs) against the tower-property
/// estimate along each outer path's own future (rhs).
#[allow(clippy::too_many_arguments)]
pub fn composition_check(
    adjoint: &AdjointPath,
    control: &ControlPath,
    seeds: &SeedPolicy,
    knot: usize,
    outer: usize,
    branches: usize,
    phi: StateFunctional<'_>,
    gamma: StateFunctional<'_>,
) -> Result<Comparison> {
    let model = &adjoint.model;
    let grid = &adjoint.grid;
    let rows: Vec<(f64, f64)> = (0..outer as u64)
        .map(|i| {
            let w = sample_wiener(seeds, grid, model.noise_dim(), i);
            let x = solve_state(model, control, &w, grid)?;
            let xk = x.states[knot].clone();
            let (f, g) = (phi(&xk), gamma(&xk));
            let form = SecondAdjointForm::new(adjoint, control, *seeds, &w, knot, xk.clone(), branches)?;
            let lhs = form.eval(&f, &g)?.mean;
            let direct = branch_gram(adjoint, control, &w, knot, &xk, &[f, g])?;
            Ok((lhs, direct[1]))
        })
        .collect::<Result<_>>()?;
    let lhs: MeanAccumulator = rows.iter().map(|r| r.0).collect();
    let rhs: MeanAccumulator = rows.iter().map(|r| r.1).collect();
    let gap: MeanAccumulator = rows.iter().map(|r| r.0 - r.1).collect();
    Ok(Comparison {
        lhs: lhs.estimate(),
        rhs: rhs.estimate(),
        gap: gap.estimate(),
    })
}

/// `E|⟨(P_{t_k+h} − P_{t_k}) f, g⟩|` for each lag `h` (in steps), with the
/// branches at `t_k + h` sharing their tails with those at `t_k`.
#[allow(clippy::too_many_arguments)]
pub fn weak_continuity(
    adjoint: &AdjointPath,
    control: &ControlPath,
    seeds: &SeedPolicy,
    knot: usize,
    lags: &[usize],
    outer: usize,
    branches: usize,
    f: &SpectralField,
    g: &SpectralField,
) -> Result<Vec<(f64, Estimate)>> {
    check_param(
        "branches",
        branches as f64,
        branches >= 2,
        "need at least two inner branches",
    )?;
    let model = &adjoint.model;
    let grid = &adjoint.grid;
    let n = grid.n_steps();
    if let Some(&h) = lags.iter().find(|&&h| knot + h >= n) {
        return Err(Error::KnotOutOfRange {
            index: knot + h,
            n_steps: n,
        });
    }
    let fs = [f.clone(), g.clone()];
    let per_outer: Vec<Vec<f64>> = (0..outer as u64)
        .map(|i| {
            let w = sample_wiener(seeds, grid, model.noise_dim(), i);
            let x = solve_state(model, control, &w, grid)?;
            let per_branch: Vec<Vec<f64>> = (0..branches as u64)
                .into_par_iter()
                .map(|b| {
                    let wb = branch(&w, knot, seeds, b)?;
                    let base = branch_gram(adjoint, control, &wb, knot, &x.states[knot], &fs)?[1];
                    let mut diffs = Vec::with_capacity(lags.len());
                    for &h in lags {
                        let wh = splice(&w, &wb, knot + h)?;
                        let later = branch_gram(adjoint, control, &wh, knot + h, &x.states[knot + h], &fs)?[1];
                        diffs.push(later - base);
                    }
                    Ok(diffs)
                })
                .collect::<Result<_>>()?;
            Ok((0..lags.len())
                .map(|l| per_branch.iter().map(|d| d[l]).sum::<f64>() / branches as f64)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(lags
        .iter()
        .enumerate()
        .map(|(l, &h)| {
            let acc: MeanAccumulator = per_outer.iter().map(|d| d[l].abs()).collect();
            (h as f64 * grid.dt(), acc.estimate())
        })
        .collect())
}
