//! Monte Carlo harness for the `L^p(D)` moment bound of stochastic integrals
//!
//! `E‖∫_0^t H_s dW_s‖_p^p ≤ c_p (∫_0^t (E‖H_s‖_{L^p(D;R^d)}^p)^{2/p} ds)^{p/2}`.
//!
//! `c_p` is Davis' sharp Burkholder constant: the `p`-th power of the largest
//! zero of the Hermite function of order `p`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_wiener, SeedPolicy, Stream, TimeGrid};
use crate::error::{check_param, Result};
use crate::spectral::SpectralSpace;

/// Increments strictly before the evaluation knot. Integrands only ever see
/// this view, which makes them progressive by construction.
#[derive(Debug, Clone, Copy)]
pub struct PathPrefix<'a> {
    increments: &'a [f64],
    dim: usize,
    dt: f64,
}

impl<'a> PathPrefix<'a> {
    pub(crate) fn new(increments: &'a [f64], dim: usize, dt: f64) -> Self {
        Self { increments, dim, dt }
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len() / self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn value(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for k in 0..self.n_steps() {
            for (wj, dw) in w.iter_mut().zip(self.increment(k)) {
                *wj += dw;
            }
        }
        w
    }
}

/// A field-valued progressive integrand `H^j_{t_k}(x)`.
pub trait FieldIntegrand: Sync {
    fn dim(&self) -> usize;

    /// Grid values of `H^1..H^d` at knot `k`, one vector per noise component.
    fn values(&self, k: usize, t: f64, past: PathPrefix<'_>) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdgRow {
    pub p: f64,
    pub t: f64,
    pub c_p: f64,
    pub lhs: f64,
    pub lhs_std_error: f64,
    pub rhs: f64,
    /// `lhs / rhs`; zero when both sides vanish.
    pub ratio: f64,
    /// Bootstrap 99% upper confidence bound on the ratio.
    pub ratio_upper99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdgReport {
    pub rows: Vec<BdgRow>,
}

/// Largest positive zero of the Hermite function of order `nu`, i.e. of the
/// parabolic cylinder function `D_ν` solving `y'' + (ν + ½ − x²/4) y = 0`.
///
/// The decaying solution is started from its asymptotic expansion far to the
/// right and integrated leftwards with RK4 until its first sign change.
fn hermite_largest_zero(nu: f64) -> f64 {
    let x0 = 2.0 * (4.0 * nu + 2.0).sqrt() + 8.0;
    // y = x^ν e^{-x²/4} S(x) with S = 1 + a1 + a2; the common positive factor
    // is dropped, only the logarithmic derivative matters.
    let x2 = x0 * x0;
    let a1 = -nu * (nu - 1.0) / (2.0 * x2);
    let a2 = nu * (nu - 1.0) * (nu - 2.0) * (nu - 3.0) / (8.0 * x2 * x2);
    let s = 1.0 + a1 + a2;
    let ds = nu * (nu - 1.0) / (x2 * x0) - 4.0 * a2 / x0;
    let mut y = s;
    let mut dy = s * (nu / x0 - x0 / 2.0) + ds;
    let f = |x: f64, y: f64| -(nu + 0.5 - x * x / 4.0) * y;
    let mut x = x0;
    let step = -1e-4;
    loop {
        let (k1y, k1v) = (dy, f(x, y));
        let (k2y, k2v) = (dy + 0.5 * step * k1v, f(x + 0.5 * step, y + 0.5 * step * k1y));
        let (k3y, k3v) = (dy + 0.5 * step * k2v, f(x + 0.5 * step, y + 0.5 * step * k2y));
        let (k4y, k4v) = (dy + step * k3v, f(x + step, y + step * k3y));
        let ny = y + step / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        let ndy = dy + step / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        if ny == 0.0 || ny.signum() != y.signum() {
            // Linear interpolation inside one tiny step.
            return x + step * y / (y - ny);
        }
        x += step;
        y = ny;
        dy = ndy;
        if y.abs() > 1e100 {
            y *= 1e-100;
            dy *= 1e-100;
        }
        assert!(x > 0.0, "no positive zero found for order {nu}");
    }
}

/// Davis' constant `c_p = z_p^p`; `c_2 = 1` is the Itô isometry.
pub fn davis_constant(p: f64) -> f64 {
    if p == 2.0 {
        return 1.0;
    }
    hermite_largest_zero(p).powf(p)
}

struct SampleMoments {
    /// `‖I_{t}‖_p^p` at each requested time.
    lhs: Vec<f64>,
    /// `‖H_{t_k}‖_{L^p(D;R^d)}^p` for every knot before the last requested time.
    integrand: Vec<f64>,
}

fn pointwise_norm_power(weights: &[f64], comps: &[Vec<f64>], p: f64) -> f64 {
    let n = weights.len();
    let mut acc = 0.0;
    for i in 0..n {
        let r2: f64 = comps.iter().map(|c| c[i] * c[i]).sum();
        acc += weights[i] * r2.powf(p / 2.0);
    }
    acc
}

/// Estimates both sides of the bound at each `t ∈ times` (snapped to knots).
pub fn bdg_lp_check(
    p: f64,
    integrand: &dyn FieldIntegrand,
    space: &SpectralSpace,
    grid: &TimeGrid,
    seeds: &SeedPolicy,
    ensemble: usize,
    times: &[f64],
) -> Result<BdgReport> {
    check_param("p", p, (2.0..=8.0).contains(&p), "exponent must lie in [2, 8]")?;
    check_param("ensemble", ensemble as f64, ensemble >= 2, "need at least two samples")?;
    let knots: Vec<usize> = times
        .iter()
        .map(|&t| {
            grid.snap(t, 1e-6).ok_or(crate::Error::InvalidParameter {
                name: "t",
                value: t,
                reason: "evaluation time must be a grid knot",
            })
        })
        .collect::<Result<_>>()?;
    let last = knots.iter().copied().max().unwrap_or(0);
    let dim = integrand.dim();
    let weights = space.grid().weights();
    let npts = space.n_points();

    let samples: Vec<SampleMoments> = (0..ensemble as u64)
        .into_par_iter()
        .map(|i| {
            let w = sample_wiener(seeds, grid, dim, i);
            let mut integral = vec![0.0; npts];
            let mut lhs = vec![0.0; knots.len()];
            let mut hnorm = Vec::with_capacity(last);
            for k in 0..=last {
                for (slot, &kk) in knots.iter().enumerate() {
                    if kk == k {
                        lhs[slot] = crate::spectral::lp_power_grid(weights, &integral, p);
                    }
                }
                if k == last {
                    break;
                }
                let h = integrand.values(k, grid.time(k), w.prefix(k));
                hnorm.push(pointwise_norm_power(weights, &h, p));
                for (j, dw) in w.increment(k).iter().enumerate() {
                    for (acc, hv) in integral.iter_mut().zip(&h[j]) {
                        *acc += hv * dw;
                    }
                }
            }
            SampleMoments { lhs, integrand: hnorm }
        })
        .collect();

    let c_p = davis_constant(p);
    let dt = grid.dt();
    let side_values = |idx: &[usize]| -> (Vec<f64>, Vec<f64>) {
        let n = idx.len() as f64;
        let mut lhs = vec![0.0; knots.len()];
        let mut hmean = vec![0.0; last];
        for &i in idx {
            let s = &samples[i];
            lhs.iter_mut().zip(&s.lhs).for_each(|(a, b)| *a += b / n);
            hmean.iter_mut().zip(&s.integrand).for_each(|(a, b)| *a += b / n);
        }
        let rhs = knots
            .iter()
            .map(|&kk| {
                let inner: f64 = hmean[..kk].iter().map(|m| dt * m.powf(2.0 / p)).sum();
                c_p * inner.powf(p / 2.0)
            })
            .collect();
        (lhs, rhs)
    };
    let ratio = |l: f64, r: f64| {
        if r > 0.0 {
            l / r
        } else if l == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    };

    let all: Vec<usize> = (0..ensemble).collect();
    let (lhs, rhs) = side_values(&all);

    let n_boot = 400;
    let mut rng = seeds.rng(Stream::Bootstrap, 0, 0);
    let mut boot: Vec<Vec<f64>> = vec![Vec::with_capacity(n_boot); knots.len()];
    let mut idx = vec![0usize; ensemble];
    for _ in 0..n_boot {
        idx.iter_mut().for_each(|i| *i = rng.gen_range(0..ensemble));
        let (bl, br) = side_values(&idx);
        for (slot, b) in boot.iter_mut().enumerate() {
            b.push(ratio(bl[slot], br[slot]));
        }
    }

    let rows = knots
        .iter()
        .enumerate()
        .map(|(slot, &kk)| {
            let mut b = boot[slot].clone();
            b.sort_by(|a, c| a.total_cmp(c));
            let upper = b[((0.99 * n_boot as f64).ceil() as usize).min(n_boot - 1)];
            let vals: crate::stats::MeanAccumulator = samples.iter().map(|s| s.lhs[slot]).collect();
            BdgRow {
                p,
                t: grid.time(kk),
                c_p,
                lhs: lhs[slot],
                lhs_std_error: vals.std_error(),
                rhs: rhs[slot],
                ratio: ratio(lhs[slot], rhs[slot]),
                ratio_upper99: upper,
            }
        })
        .collect();
    Ok(BdgReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn largest_real_root(coeffs: &[f64]) -> f64 {
        // Bisection from above on a polynomial given highest degree first.
        let eval = |x: f64| coeffs.iter().fold(0.0, |acc, c| acc * x + c);
        let (mut lo, mut hi) = (0.0f64, 10.0f64);
        // Scan down to bracket the largest root.
        let mut x = hi;
        while eval(x).signum() == eval(hi).signum() {
            x -= 1e-3;
        }
        lo = lo.max(x);
        hi = x + 1e-3;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if eval(mid).signum() == eval(hi).signum() {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn hermite_zeros_match_polynomials() {
        // He_2 = x² − 1, He_4 = x⁴ − 6x² + 3, He_6 = x⁶ − 15x⁴ + 45x² − 15.
        let he4 = largest_real_root(&[1.0, 0.0, -6.0, 0.0, 3.0]);
        let he6 = largest_real_root(&[1.0, 0.0, -15.0, 0.0, 45.0, 0.0, -15.0]);
        assert!((hermite_largest_zero(2.0) - 1.0).abs() < 1e-6);
        assert!((hermite_largest_zero(4.0) - he4).abs() < 1e-6);
        assert!((hermite_largest_zero(6.0) - he6).abs() < 1e-6);
        assert!((he4 * he4 - (3.0 + 6f64.sqrt())).abs() < 1e-9);
        assert!((davis_constant(4.0) - (3.0 + 6f64.sqrt()).powi(2)).abs() < 1e-4);
    }

    #[test]
    fn hermite_zero_grows_with_order() {
        let zs: Vec<f64> = [2.0, 2.5, 3.0, 3.5, 4.0, 6.0, 8.0]
            .iter()
            .map(|&p| hermite_largest_zero(p))
            .collect();
        assert!(zs.windows(2).all(|w| w[0] < w[1]), "{zs:?}");
    }
}
