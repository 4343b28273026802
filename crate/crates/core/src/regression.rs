//! Least-squares regression of vector-valued responses on polynomial
//! features of the leading state modes, used for conditional expectations
//! in the backward sweep.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Polynomial basis in the leading `n_inputs` mode coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub n_inputs: usize,
    pub degree: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { n_inputs: 4, degree: 2 }
    }
}

/// Default Tikhonov parameter, relative to the mean Gram diagonal.
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Standardized inputs; inputs with no spread across the sample are dropped.
#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    center: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<usize>,
}

impl Standardizer {
    fn fit(inputs: &[&[f64]], n_inputs: usize) -> Self {
        let n = inputs.len() as f64;
        let mut center = vec![0.0; n_inputs];
        let mut scale = vec![1.0; n_inputs];
        let mut active = Vec::new();
        for i in 0..n_inputs {
            let mean = inputs.iter().map(|x| x[i]).sum::<f64>() / n;
            let var = inputs.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / n;
            center[i] = mean;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                scale[i] = sd;
                active.push(i);
            }
        }
        Self { center, scale, active }
    }

    fn features(&self, x: &[f64], degree: usize, out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        let z: Vec<f64> = self
            .active
            .iter()
            .map(|&i| (x[i] - self.center[i]) / self.scale[i])
            .collect();
        if degree >= 1 {
            out.extend_from_slice(&z);
        }
        if degree >= 2 {
            for a in 0..z.len() {
                for b in a..z.len() {
                    out.push(z[a] * z[b]);
                }
            }
        }
        if degree >= 3 {
            for a in 0..z.len() {
                for b in a..z.len() {
                    for c in b..z.len() {
                        out.push(z[a] * z[b] * z[c]);
                    }
                }
            }
        }
    }
}

/// Fitted map from inputs to `n_outputs` responses.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    spec: BasisSpec,
    standardizer: Standardizer,
    /// `n_features × n_outputs`.
    coef: DMatrix<f64>,
    /// Regularization actually used, if the Gram matrix was singular.
    pub ridge: Option<f64>,
    /// Approximate standard error of each fitted output (residual spread
    /// scaled by `sqrt(n_features / n)`).
    pub output_se: Vec<f64>,
}

impl RegressionFit {
    /// Least-squares fit of `responses[i]` on features of `inputs[i]`.
    /// Falls back to a ridge fit when the Gram matrix is not positive definite.
    pub fn fit(spec: BasisSpec, inputs: &[&[f64]], responses: &[&[f64]]) -> Self {
        assert_eq!(inputs.len(), responses.len());
        assert!(!inputs.is_empty(), "regression needs samples");
        let n = inputs.len();
        let n_out = responses[0].len();
        let n_in = spec.n_inputs.min(inputs[0].len());
        let standardizer = Standardizer::fit(inputs, n_in);
        let mut row = Vec::new();
        standardizer.features(inputs[0], spec.degree, &mut row);
        let m = row.len();
        let mut phi = DMatrix::<f64>::zeros(n, m);
        for (i, x) in inputs.iter().enumerate() {
            standardizer.features(x, spec.degree, &mut row);
            for (j, v) in row.iter().enumerate() {
                phi[(i, j)] = *v;
            }
        }
        let y = DMatrix::<f64>::from_fn(n, n_out, |i, j| responses[i][j]);
        let gram = phi.tr_mul(&phi);
        let rhs = phi.tr_mul(&y);
        let (coef, ridge) = match gram.clone().cholesky() {
            Some(ch) if well_conditioned(&ch.l()) => (ch.solve(&rhs), None),
            _ => {
                let lam = DEFAULT_RIDGE * gram.trace() / m as f64;
                let reg = &gram + DMatrix::<f64>::identity(m, m) * lam;
                let ch = reg
                    .cholesky()
                    .expect("ridge-regularized Gram matrix is positive definite");
                (ch.solve(&rhs), Some(lam))
            }
        };
        let resid = &y - &phi * &coef;
        let dof_scale = (m as f64 / n as f64).sqrt();
        let output_se = (0..n_out)
            .map(|j| {
                let v = resid.column(j).iter().map(|r| r * r).sum::<f64>() / (n.max(m + 1) - m) as f64;
                v.sqrt() * dof_scale
            })
            .collect();
        Self {
            spec,
            standardizer,
            coef,
            ridge,
            output_se,
        }
    }

    pub fn n_features(&self) -> usize {
        self.coef.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.coef.ncols()
    }

    pub fn evaluate(&self, input: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.n_features());
        self.standardizer.features(input, self.spec.degree, &mut row);
        let phi = DVector::from_vec(row);
        (self.coef.tr_mul(&phi)).iter().copied().collect()
    }
}

fn well_conditioned(l: &DMatrix<f64>) -> bool {
    let d: Vec<f64> = l.diagonal().iter().map(|x| x.abs()).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    min > 1e-7 * max
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_a_quadratic_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| vec![1.0 + 2.0 * x[0] - x[1] * x[2], x[0] * x[0]])
            .collect();
        let xr: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let yr: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
        let fit = RegressionFit::fit(BasisSpec { n_inputs: 3, degree: 2 }, &xr, &yr);
        assert!(fit.ridge.is_none());
        assert_eq!(fit.n_features(), 10);
        let probe = [0.3, -0.2, 0.5];
        let out = fit.evaluate(&probe);
        assert!((out[0] - (1.0 + 0.6 + 0.1)).abs() < 1e-10);
        assert!((out[1] - 0.09).abs() < 1e-10);
        assert!(fit.output_se.iter().all(|s| *s < 1e-10));
    }

    #[test]
    fn constant_inputs_give_the_sample_mean() {
        let xs = vec![vec![0.5, 0.5]; 50];
        let ys: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64]).collect();
        let xr: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let yr: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
        let fit = RegressionFit::fit(BasisSpec::default(), &xr, &yr);
        assert_eq!(fit.n_features(), 1);
        assert!((fit.evaluate(&[0.5, 0.5])[0] - 24.5).abs() < 1e-10);
    }

    #[test]
    fn collinear_inputs_trigger_the_ridge_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                let a: f64 = rng.gen_range(-1.0..1.0);
                vec![a, 2.0 * a]
            })
            .collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![3.0 * x[0]]).collect();
        let xr: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let yr: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
        let fit = RegressionFit::fit(BasisSpec { n_inputs: 2, degree: 1 }, &xr, &yr);
        assert!(fit.ridge.is_some());
        assert!((fit.evaluate(&[0.4, 0.8])[0] - 1.2).abs() < 1e-4);
    }
}
