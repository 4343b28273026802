//! Small Monte Carlo reductions. Everything is accumulated serially in
//! sample order so results do not depend on scheduling.

use serde::{Deserialize, Serialize};

/// Welford mean/variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.mean(),
            std_error: self.std_error(),
        }
    }
}

impl FromIterator<f64> for MeanAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::default();
        iter.into_iter().for_each(|x| acc.push(x));
        acc
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            std_error: 0.0,
        }
    }
}

/// `sqrt(a² + b²)`: standard error of a difference of independent estimates.
pub fn combined_se(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Per-knot accumulator of `E‖V_{t_k}‖_p^p`, giving
/// `|||V|||_p = max_k (E‖V_{t_k}‖_p^p)^{1/p}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessNorm {
    p: f64,
    sums: Vec<f64>,
    count: u64,
}

impl ProcessNorm {
    pub fn new(p: f64, n_knots: usize) -> Self {
        Self {
            p,
            sums: vec![0.0; n_knots],
            count: 0,
        }
    }

    /// Adds one sample's per-knot values of `‖V_{t_k}‖_p^p`.
    pub fn push(&mut self, powers: &[f64]) {
        assert_eq!(powers.len(), self.sums.len());
        self.sums.iter_mut().zip(powers).for_each(|(s, v)| *s += v);
        self.count += 1;
    }

    pub fn merge(&mut self, other: &ProcessNorm) {
        self.sums.iter_mut().zip(&other.sums).for_each(|(s, v)| *s += v);
        self.count += other.count;
    }

    pub fn per_knot(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.sums.iter().map(|s| (s / n).powf(1.0 / self.p)).collect()
    }

    pub fn sup(&self) -> f64 {
        self.per_knot().into_iter().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 8.5, 3.25];
        let acc: MeanAccumulator = xs.iter().copied().collect();
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((acc.mean() - mean).abs() < 1e-14);
        assert!((acc.variance() - var).abs() < 1e-12);
        assert!((acc.std_error() - (var / 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn process_norm_takes_the_worst_knot() {
        let mut n = ProcessNorm::new(2.0, 3);
        n.push(&[0.0, 4.0, 1.0]);
        n.push(&[0.0, 4.0, 1.0]);
        assert_eq!(n.per_knot(), vec![0.0, 2.0, 1.0]);
        assert_eq!(n.sup(), 2.0);
    }
}
