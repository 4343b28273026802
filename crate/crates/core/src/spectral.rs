//! Dirichlet Laplacian calculus on the unit interval.
//!
//! Fields are stored twice: as coefficients in the orthonormal sine basis
//! `e_k(x) = √2 sin(kπx)` and as values on a midpoint collocation grid
//! `x_i = (i + ½)/N`. The two views are linked by a type-II/III discrete sine
//! transform, and the midpoint rule with weights `1/N` is the quadrature for
//! every integral over the domain. With `N ≥ 2·n_modes` the discrete inner
//! product is exact for products of two band-limited fields.

use std::fmt;
use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};

use crate::error::{check_param, Error, Result};

/// Uniform midpoint grid on (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl SpatialGrid {
    pub fn midpoint(n_points: usize) -> Result<Self> {
        check_param(
            "n_points",
            n_points as f64,
            n_points >= 2,
            "need at least two grid points",
        )?;
        let h = 1.0 / n_points as f64;
        let points = (0..n_points).map(|i| (i as f64 + 0.5) * h).collect();
        Ok(Self {
            points,
            weights: vec![h; n_points],
        })
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Midpoint quadrature of grid values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Spectrum of `A = κΔ` with Dirichlet conditions: `λ_k = κ(kπ)²`.
///
/// `κ = 1` is the heat operator; `κ = 0` switches diffusion off and is only
/// meant for testing the time stepper in isolation.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletLaplacian {
    diffusivity: f64,
    eigenvalues: Vec<f64>,
}

impl DirichletLaplacian {
    pub fn new(n_modes: usize, diffusivity: f64) -> Result<Self> {
        check_param("n_modes", n_modes as f64, n_modes >= 1, "need at least one mode")?;
        check_param("diffusivity", diffusivity, diffusivity >= 0.0, "must be nonnegative")?;
        let pi = std::f64::consts::PI;
        let eigenvalues = (1..=n_modes).map(|k| diffusivity * (k as f64 * pi).powi(2)).collect();
        Ok(Self {
            diffusivity,
            eigenvalues,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn diffusivity(&self) -> f64 {
        self.diffusivity
    }

    /// Eigenvalues of `−A`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `exp(−λ_k t)` for every mode.
    pub fn decay_factors(&self, t: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| (-l * t).exp()).collect()
    }
}

/// Grid, spectrum and transform plan shared by every field of one resolution.
pub struct SpectralSpace {
    grid: SpatialGrid,
    laplacian: DirichletLaplacian,
    dst: Arc<dyn TransformType2And3<f64>>,
    scratch_len: usize,
}

impl fmt::Debug for SpectralSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralSpace")
            .field("n_modes", &self.n_modes())
            .field("n_points", &self.n_points())
            .field("diffusivity", &self.laplacian.diffusivity)
            .finish()
    }
}

impl SpectralSpace {
    /// Heat-operator space with the default `n_points = 2·n_modes`.
    pub fn new(n_modes: usize) -> Result<Arc<Self>> {
        Self::with_resolution(n_modes, 2 * n_modes, 1.0)
    }

    pub fn with_resolution(n_modes: usize, n_points: usize, diffusivity: f64) -> Result<Arc<Self>> {
        let laplacian = DirichletLaplacian::new(n_modes, diffusivity)?;
        let grid = SpatialGrid::midpoint(n_points)?;
        check_param(
            "n_points",
            n_points as f64,
            n_points > n_modes,
            "grid must resolve every mode (n_points > n_modes)",
        )?;
        let dst = DctPlanner::new().plan_dst2(n_points);
        let scratch_len = dst.get_scratch_len();
        Ok(Arc::new(Self {
            grid,
            laplacian,
            dst,
            scratch_len,
        }))
    }

    pub fn n_modes(&self) -> usize {
        self.laplacian.n_modes()
    }

    pub fn n_points(&self) -> usize {
        self.grid.n_points()
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn laplacian(&self) -> &DirichletLaplacian {
        &self.laplacian
    }

    fn same_as(&self, other: &SpectralSpace) -> bool {
        self.n_modes() == other.n_modes()
            && self.n_points() == other.n_points()
            && self.laplacian.diffusivity == other.laplacian.diffusivity
    }

    fn describe(&self) -> String {
        format!(
            "{} modes / {} points / κ={}",
            self.n_modes(),
            self.n_points(),
            self.laplacian.diffusivity
        )
    }

    /// Discrete orthogonal projection of grid values onto the mode coefficients.
    pub fn to_modes(&self, values: &[f64]) -> Vec<f64> {
        let n = self.n_points();
        assert_eq!(values.len(), n, "grid length mismatch");
        let mut buf = values.to_vec();
        let mut scratch = vec![0.0; self.scratch_len];
        self.dst.process_dst2_with_scratch(&mut buf, &mut scratch);
        let scale = std::f64::consts::SQRT_2 / n as f64;
        buf.truncate(self.n_modes());
        buf.iter_mut().for_each(|c| *c *= scale);
        buf
    }

    /// Synthesis of grid values from mode coefficients.
    pub fn to_grid(&self, modes: &[f64]) -> Vec<f64> {
        let n = self.n_points();
        assert_eq!(modes.len(), self.n_modes(), "mode length mismatch");
        let mut buf = vec![0.0; n];
        for (b, c) in buf.iter_mut().zip(modes) {
            *b = std::f64::consts::SQRT_2 * c;
        }
        let mut scratch = vec![0.0; self.scratch_len];
        self.dst.process_dst3_with_scratch(&mut buf, &mut scratch);
        buf
    }

    pub fn zero(self: &Arc<Self>) -> SpectralField {
        SpectralField {
            space: Arc::clone(self),
            modes: vec![0.0; self.n_modes()],
            grid: vec![0.0; self.n_points()],
        }
    }

    pub fn field_from_modes(self: &Arc<Self>, modes: Vec<f64>) -> SpectralField {
        let grid = self.to_grid(&modes);
        SpectralField {
            space: Arc::clone(self),
            modes,
            grid,
        }
    }

    /// Projects grid values onto the basis; the stored grid values are the
    /// synthesis of the projection, not the raw input.
    pub fn field_from_grid(self: &Arc<Self>, values: &[f64]) -> SpectralField {
        self.field_from_modes(self.to_modes(values))
    }

    pub fn field_from_fn(self: &Arc<Self>, f: impl Fn(f64) -> f64) -> SpectralField {
        let values: Vec<f64> = self.grid.points().iter().map(|&x| f(x)).collect();
        self.field_from_grid(&values)
    }

    /// The single eigenfunction `sin(kπx)` (not normalized).
    pub fn sine(self: &Arc<Self>, k: usize) -> SpectralField {
        let mut modes = vec![0.0; self.n_modes()];
        modes[k - 1] = std::f64::consts::FRAC_1_SQRT_2;
        self.field_from_modes(modes)
    }

    /// Discrete `L²` inner product of two grid arrays.
    pub fn inner_grid(&self, a: &[f64], b: &[f64]) -> f64 {
        let w = self.grid.weights();
        a.iter().zip(b).zip(w).map(|((x, y), w)| x * y * w).sum()
    }
}

/// Sign of the exponent in `(−A)^{±η}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerSign {
    Positive,
    Negative,
}

/// A function on (0, 1) with coherent modal and grid representations.
#[derive(Clone)]
pub struct SpectralField {
    space: Arc<SpectralSpace>,
    modes: Vec<f64>,
    grid: Vec<f64>,
}

impl fmt::Debug for SpectralField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralField")
            .field("space", &self.space)
            .field("modes", &self.modes)
            .finish()
    }
}

impl PartialEq for SpectralField {
    fn eq(&self, other: &Self) -> bool {
        self.space.same_as(&other.space) && self.modes == other.modes
    }
}

impl SpectralField {
    pub fn space(&self) -> &Arc<SpectralSpace> {
        &self.space
    }

    pub fn modes(&self) -> &[f64] {
        &self.modes
    }

    pub fn grid_values(&self) -> &[f64] {
        &self.grid
    }

    pub fn into_modes(self) -> Vec<f64> {
        self.modes
    }

    fn check_same(&self, other: &SpectralField) -> Result<()> {
        if self.space.same_as(&other.space) {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: self.space.describe(),
                right: other.space.describe(),
            })
        }
    }

    fn map_modes(&self, f: impl Fn(usize, f64) -> f64) -> SpectralField {
        let modes = self.modes.iter().enumerate().map(|(k, &c)| f(k, c)).collect();
        self.space.field_from_modes(modes)
    }

    /// `e^{tA} f`.
    pub fn apply_semigroup(&self, t: f64) -> Result<SpectralField> {
        check_param("t", t, t >= 0.0, "semigroup time must be nonnegative")?;
        if t == 0.0 {
            return Ok(self.clone());
        }
        let decay = self.space.laplacian.decay_factors(t);
        Ok(self.map_modes(|k, c| c * decay[k]))
    }

    /// `(−A)^{±η} f`.
    pub fn apply_fractional_power(&self, eta: f64, sign: PowerSign) -> Result<SpectralField> {
        check_param("eta", eta, (0.0..=1.0).contains(&eta), "exponent must lie in [0, 1]")?;
        if eta == 0.0 {
            return Ok(self.clone());
        }
        let exponent = match sign {
            PowerSign::Positive => eta,
            PowerSign::Negative => -eta,
        };
        let lambdas = self.space.laplacian.eigenvalues();
        Ok(self.map_modes(|k, c| c * lambdas[k].powf(exponent)))
    }

    /// Midpoint-rule `L^p` norm.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        check_param("p", p, p >= 1.0, "norm exponent must be at least 1")?;
        Ok(lp_norm_grid(self.space.grid.weights(), &self.grid, p))
    }

    /// Pointwise product on the grid, projected back onto the modes.
    pub fn multiply_pointwise(&self, other: &SpectralField) -> Result<SpectralField> {
        self.check_same(other)?;
        let prod: Vec<f64> = self.grid.iter().zip(&other.grid).map(|(a, b)| a * b).collect();
        Ok(self.space.field_from_grid(&prod))
    }

    /// Discrete `L²` inner product.
    pub fn inner(&self, other: &SpectralField) -> Result<f64> {
        self.check_same(other)?;
        Ok(self.space.inner_grid(&self.grid, &other.grid))
    }

    pub fn integral(&self) -> f64 {
        self.space.grid.integrate(&self.grid)
    }

    pub fn scaled(&self, a: f64) -> SpectralField {
        self.map_modes(|_, c| a * c)
    }

    /// `self + a·other`.
    pub fn axpy(&self, a: f64, other: &SpectralField) -> Result<SpectralField> {
        self.check_same(other)?;
        Ok(self.map_modes(|k, c| c + a * other.modes[k]))
    }

    pub fn is_finite(&self) -> bool {
        self.modes.iter().all(|c| c.is_finite())
    }
}

pub(crate) fn lp_norm_grid(weights: &[f64], values: &[f64], p: f64) -> f64 {
    lp_power_grid(weights, values, p).powf(1.0 / p)
}

/// `∫|f|^p`, the p-th power of the norm.
pub(crate) fn lp_power_grid(weights: &[f64], values: &[f64], p: f64) -> f64 {
    let s: f64 = if p == 2.0 {
        weights.iter().zip(values).map(|(w, v)| w * v * v).sum()
    } else if p == 4.0 {
        weights.iter().zip(values).map(|(w, v)| w * (v * v) * (v * v)).sum()
    } else {
        weights.iter().zip(values).map(|(w, v)| w * v.abs().powf(p)).sum()
    };
    s
}
