//! Wiener increments on a uniform time grid, counter-based seeding and
//! branching of paths for nested (conditional) Monte Carlo.

mod bdg;

pub use bdg::{bdg_lp_check, davis_constant, BdgReport, BdgRow, FieldIntegrand, PathPrefix};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_param, Error, Result};

/// Uniform partition `0 = t_0 < … < t_n = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        check_param("horizon", horizon, horizon > 0.0, "time horizon must be positive")?;
        check_param("n_steps", n_steps as f64, n_steps >= 1, "need at least one step")?;
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Same horizon, twice as many steps.
    pub fn refined(&self) -> Self {
        Self {
            horizon: self.horizon,
            n_steps: 2 * self.n_steps,
        }
    }

    /// Index of the knot closest to `t`, if it lies within `tol·Δt` of it.
    pub fn snap(&self, t: f64, tol: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.n_steps as f64 || (x - k).abs() > tol {
            None
        } else {
            Some(k as usize)
        }
    }
}

/// Purpose tags that keep independent random streams apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Wiener,
    /// Fresh tail increments for conditional sampling from a knot.
    Branch {
        knot: usize,
    },
    /// Random test fields.
    Field,
    Bootstrap,
    Custom(u32),
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Wiener => 1,
            Stream::Branch { knot } => (2 << 56) | knot as u64,
            Stream::Field => 3 << 56,
            Stream::Bootstrap => 4 << 56,
            Stream::Custom(n) => (5 << 56) | n as u64,
        }
    }
}

/// Maps `(stream, sample, branch)` to an independent generator.
///
/// The four 64-bit words are laid side by side as the 256-bit ChaCha key,
/// so the map is injective and no stream depends on how many others exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPolicy {
    pub master_seed: u64,
}

impl SeedPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn rng(&self, stream: Stream, sample: u64, branch: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&stream.tag().to_le_bytes());
        key[16..24].copy_from_slice(&sample.to_le_bytes());
        key[24..].copy_from_slice(&branch.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// Increments of a `d`-dimensional Wiener process, row-major `[step][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    increments: Vec<f64>,
    dim: usize,
    dt: f64,
    sample_index: u64,
}

impl WienerPath {
    /// Path from explicit increments; used by oracles that need to replay a
    /// scalar SDE with the same noise.
    pub fn from_increments(increments: Vec<f64>, dim: usize, dt: f64, sample_index: u64) -> Self {
        assert!(dim >= 1 && increments.len().is_multiple_of(dim));
        Self {
            increments,
            dim,
            dt,
            sample_index,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len() / self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sample_index(&self) -> u64 {
        self.sample_index
    }

    /// `ΔW_k = W_{t_{k+1}} − W_{t_k}`.
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `W_{t_k}` by cumulative summation.
    pub fn value(&self, k: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for s in 0..k {
            for (wj, dw) in w.iter_mut().zip(self.increment(s)) {
                *wj += dw;
            }
        }
        w
    }

    /// The same Brownian path on a grid with half as many steps.
    pub fn coarsened(&self) -> WienerPath {
        let n = self.n_steps();
        assert!(n.is_multiple_of(2), "need an even number of steps to coarsen");
        let d = self.dim;
        let mut increments = vec![0.0; n / 2 * d];
        for (k, chunk) in increments.chunks_mut(d).enumerate() {
            for (j, c) in chunk.iter_mut().enumerate() {
                *c = self.increments[2 * k * d + j] + self.increments[(2 * k + 1) * d + j];
            }
        }
        WienerPath {
            increments,
            dim: d,
            dt: 2.0 * self.dt,
            sample_index: self.sample_index,
        }
    }

    pub fn prefix(&self, k: usize) -> PathPrefix<'_> {
        PathPrefix::new(&self.increments[..k * self.dim], self.dim, self.dt)
    }
}

fn fill_normals(rng: &mut ChaCha8Rng, out: &mut [f64], scale: f64) {
    for x in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x = scale * z;
    }
}

/// Fresh path for outer sample `sample_index`.
pub fn sample_wiener(seeds: &SeedPolicy, grid: &TimeGrid, dim: usize, sample_index: u64) -> WienerPath {
    assert!(dim >= 1, "noise dimension must be positive");
    let mut increments = vec![0.0; grid.n_steps() * dim];
    let mut rng = seeds.rng(Stream::Wiener, sample_index, 0);
    fill_normals(&mut rng, &mut increments, grid.dt().sqrt());
    WienerPath {
        increments,
        dim,
        dt: grid.dt(),
        sample_index,
    }
}

/// A sample from `P(· | F_{t_knot})`: increments before `knot` are kept,
/// later ones are redrawn from the stream of `(knot, sample, branch_index)`.
pub fn branch(path: &WienerPath, knot: usize, seeds: &SeedPolicy, branch_index: u64) -> Result<WienerPath> {
    let n = path.n_steps();
    if knot > n {
        return Err(Error::KnotOutOfRange {
            index: knot,
            n_steps: n,
        });
    }
    let mut increments = path.increments.clone();
    let mut rng = seeds.rng(Stream::Branch { knot }, path.sample_index, branch_index);
    fill_normals(&mut rng, &mut increments[knot * path.dim..], path.dt.sqrt());
    Ok(WienerPath {
        increments,
        dim: path.dim,
        dt: path.dt,
        sample_index: path.sample_index,
    })
}

/// Increments of `head` before `knot` followed by those of `tail` from `knot` on.
pub fn splice(head: &WienerPath, tail: &WienerPath, knot: usize) -> Result<WienerPath> {
    let n = head.n_steps();
    if knot > n {
        return Err(Error::KnotOutOfRange {
            index: knot,
            n_steps: n,
        });
    }
    assert_eq!(
        (head.dim, head.n_steps()),
        (tail.dim, tail.n_steps()),
        "paths must share a grid"
    );
    let cut = knot * head.dim;
    let mut increments = head.increments[..cut].to_vec();
    increments.extend_from_slice(&tail.increments[cut..]);
    Ok(WienerPath {
        increments,
        dim: head.dim,
        dt: head.dt,
        sample_index: head.sample_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::MeanAccumulator;

    #[test]
    fn deterministic_streams() {
        let seeds = SeedPolicy::new(7);
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let a = sample_wiener(&seeds, &grid, 2, 11);
        let b = sample_wiener(&seeds, &grid, 2, 11);
        assert_eq!(a, b);
        let c = sample_wiener(&seeds, &grid, 2, 12);
        assert_ne!(a.increments(), c.increments());
        let other = sample_wiener(&SeedPolicy::new(8), &grid, 2, 11);
        assert_ne!(a.increments(), other.increments());
    }

    #[test]
    fn terminal_value_moments() {
        // W_T ~ N(0, T): mean within 3·sqrt(T/N), variance within 5%.
        let seeds = SeedPolicy::new(2024);
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let n = 10_000;
        let mut acc = MeanAccumulator::default();
        let mut sq = MeanAccumulator::default();
        for i in 0..n {
            let w = sample_wiener(&seeds, &grid, 1, i).value(32)[0];
            acc.push(w);
            sq.push(w * w);
        }
        assert!(acc.mean().abs() < 3.0 * (1.0 / n as f64).sqrt());
        let var = sq.mean() - acc.mean().powi(2);
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn branching_edges() {
        let seeds = SeedPolicy::new(3);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let w = sample_wiener(&seeds, &grid, 1, 0);
        assert_eq!(branch(&w, 16, &seeds, 5).unwrap(), w);
        let fresh = branch(&w, 0, &seeds, 5).unwrap();
        assert!(fresh.increments().iter().zip(w.increments()).all(|(a, b)| a != b));
        let b1 = branch(&w, 6, &seeds, 1).unwrap();
        let b2 = branch(&w, 6, &seeds, 2).unwrap();
        assert_eq!(&b1.increments()[..6], &w.increments()[..6]);
        assert_eq!(&b2.increments()[..6], &w.increments()[..6]);
        assert!(b1.increments()[6..]
            .iter()
            .zip(&b2.increments()[6..])
            .all(|(a, b)| a != b));
        assert!(matches!(branch(&w, 17, &seeds, 0), Err(Error::KnotOutOfRange { .. })));
    }

    #[test]
    fn tower_property_through_branches() {
        // F = W_T² averaged over branches at t_8 then over outer paths versus
        // plain Monte Carlo; both estimate T = 1.
        let seeds = SeedPolicy::new(99);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let (outer, inner) = (2000u64, 8u64);
        let mut nested = MeanAccumulator::default();
        let mut plain = MeanAccumulator::default();
        for i in 0..outer {
            let w = sample_wiener(&seeds, &grid, 1, i);
            let mut cond = 0.0;
            for b in 0..inner {
                let wb = branch(&w, 8, &seeds, b).unwrap().value(16)[0];
                cond += wb * wb / inner as f64;
            }
            nested.push(cond);
            plain.push(w.value(16)[0].powi(2));
        }
        let se = (nested.std_error().powi(2) + plain.std_error().powi(2)).sqrt();
        assert!((nested.mean() - plain.mean()).abs() < 3.0 * se);
        assert!((nested.mean() - 1.0).abs() < 3.0 * nested.std_error());
    }

    #[test]
    fn snapping() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        assert_eq!(g.snap(0.5, 1e-9), Some(32));
        assert_eq!(g.snap(0.5 + 1e-12, 1e-6), Some(32));
        assert_eq!(g.snap(0.503, 1e-6), None);
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }
}
