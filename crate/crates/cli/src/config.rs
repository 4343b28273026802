//! Experiment configuration read from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spde_smp::control::ControlPath;
use spde_smp::model::{build_scenario, ProblemModel};
use spde_smp::regression::BasisSpec;
use spde_smp::smp::MpConfig;
use spde_smp::spectral::SpectralSpace;
use spde_smp::stochastics::{SeedPolicy, TimeGrid};
use spde_smp::variation::{dyadic_epsilons, FirstVariationForm, SweepConfig};

/// Invalid configuration, naming the offending key.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_modes: usize,
    /// Defaults to `2 * n_modes`.
    pub n_points: Option<usize>,
    pub n_steps: usize,
    pub horizon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_modes: 64,
            n_points: None,
            n_steps: 512,
            horizon: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Outer Monte Carlo paths.
    pub outer: usize,
    /// Inner branches per conditional expectation.
    pub inner: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            outer: 2000,
            inner: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpikeConfig {
    /// Constant base control `u`.
    pub base: f64,
    /// Constant replacement action `v`.
    pub v: f64,
    pub t0: f64,
    /// ε runs over `2^{-max}, …, 2^{-min}`.
    pub epsilon_exponents: [i32; 2],
    /// Exponent of the first-variation norm.
    pub p_first: f64,
    pub form: FirstVariationForm,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self {
            base: -1.0,
            v: 1.0,
            t0: 0.25,
            epsilon_exponents: [4, 7],
            p_first: 4.0,
            form: FirstVariationForm::Differential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdjointConfig {
    pub regression_inputs: usize,
    pub regression_degree: usize,
    /// Paths used for the backward sweep.
    pub fit_samples: usize,
    /// Window knots sampled per ε for the final duality.
    pub final_duality_knots: usize,
}

impl Default for AdjointConfig {
    fn default() -> Self {
        Self {
            regression_inputs: 4,
            regression_degree: 2,
            fit_samples: 1000,
            final_duality_knots: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpSection {
    pub knots: usize,
    pub samples: usize,
    pub threshold_se: f64,
}

impl Default for MpSection {
    fn default() -> Self {
        Self {
            knots: 8,
            samples: 16,
            threshold_se: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub samples: usize,
    /// Switch times of the two-piece candidates, as fractions of the horizon.
    pub switch_fractions: Vec<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            switch_fractions: vec![0.25, 0.5, 0.75],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BdgConfig {
    pub samples: usize,
    pub exponents: Vec<f64>,
}

impl Default for BdgConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            exponents: vec![2.0, 4.0],
        }
    }
}

/// Pass/fail thresholds of the gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub first_variation_slope: [f64; 2],
    pub second_variation_slope: [f64; 2],
    pub residual_slope_min: f64,
    pub cost_slope_min: f64,
    /// Multiple of the standard error used by every statistical gate.
    pub se_multiple: f64,
    /// Required shrink factor of duality gaps when `dt` is halved.
    pub duality_refinement_factor: f64,
    pub adjoint_closed_form: f64,
    pub adjoint_closed_form_refined: f64,
    pub second_adjoint_closed_form: f64,
    pub flow_bound: f64,
    pub final_duality_slope_min: f64,
    pub mp_violation_budget: f64,
    pub mp_suboptimal_min: f64,
    pub bdg_ratio_max: f64,
    pub single_mode: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            first_variation_slope: [0.4, 0.6],
            second_variation_slope: [0.85, 1.15],
            residual_slope_min: 1.15,
            cost_slope_min: 1.0,
            se_multiple: 3.0,
            duality_refinement_factor: 2.0,
            adjoint_closed_form: 1e-2,
            adjoint_closed_form_refined: 5e-3,
            second_adjoint_closed_form: 1e-2,
            flow_bound: 10.0,
            final_duality_slope_min: 1.0,
            mp_violation_budget: 0.01,
            mp_suboptimal_min: 0.2,
            bdg_ratio_max: 1.0,
            single_mode: 1e-10,
        }
    }
}

/// Sizes used by `accept` where they differ from the main sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcceptConfig {
    /// Steps of the variation-rate sweep; must resolve the smallest ε.
    pub rates_n_steps: usize,
    pub rates_epsilon_exponents: [i32; 2],
    pub rates_samples: usize,
    pub duality_samples: usize,
    pub single_mode_paths: usize,
}

impl Default for AcceptConfig {
    fn default() -> Self {
        Self {
            rates_n_steps: 2048,
            rates_epsilon_exponents: [4, 9],
            rates_samples: 2000,
            duality_samples: 400,
            single_mode_paths: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub spike: SpikeConfig,
    #[serde(default)]
    pub adjoint: AdjointConfig,
    #[serde(default)]
    pub mp: MpSection,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub bdg: BdgConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub accept: AcceptConfig,
}

fn default_seed() -> u64 {
    20_240_917
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "nonconvex-sigma".into(),
            params: BTreeMap::new(),
            seed: default_seed(),
            out: None,
            threads: None,
            grid: GridConfig::default(),
            ensemble: EnsembleConfig::default(),
            spike: SpikeConfig::default(),
            adjoint: AdjointConfig::default(),
            mp: MpSection::default(),
            oracle: OracleConfig::default(),
            bdg: BdgConfig::default(),
            tolerances: Tolerances::default(),
            accept: AcceptConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(invalid(key, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("grid.n_modes", self.grid.n_modes)?;
        positive("grid.n_steps", self.grid.n_steps)?;
        positive("ensemble.outer", self.ensemble.outer)?;
        positive("ensemble.inner", self.ensemble.inner)?;
        positive("mp.knots", self.mp.knots)?;
        positive("mp.samples", self.mp.samples)?;
        positive("oracle.samples", self.oracle.samples)?;
        positive("bdg.samples", self.bdg.samples)?;
        positive("adjoint.fit_samples", self.adjoint.fit_samples)?;
        positive("adjoint.final_duality_knots", self.adjoint.final_duality_knots)?;
        if let Some(n) = self.grid.n_points {
            if n < 2 {
                return Err(invalid("grid.n_points", "need at least two points"));
            }
        }
        if let Some(0) = self.threads {
            return Err(invalid("threads", "must be positive"));
        }
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return Err(invalid("grid.horizon", "must be positive"));
        }
        self.check_epsilons(
            "spike.epsilon_exponents",
            self.spike.epsilon_exponents,
            self.grid.n_steps,
        )?;
        self.check_epsilons(
            "accept.rates_epsilon_exponents",
            self.accept.rates_epsilon_exponents,
            self.accept.rates_n_steps,
        )?;
        if self.spike.p_first.is_nan() || self.spike.p_first < 1.0 {
            return Err(invalid("spike.p_first", "must be at least 1"));
        }
        if self.mp.threshold_se.is_nan() || self.mp.threshold_se < 0.0 {
            return Err(invalid("mp.threshold_se", "must be nonnegative"));
        }
        for (key, v) in [
            ("tolerances.mp_violation_budget", self.tolerances.mp_violation_budget),
            ("tolerances.mp_suboptimal_min", self.tolerances.mp_suboptimal_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(key, "must lie in [0, 1]"));
            }
        }
        for (key, [lo, hi]) in [
            (
                "tolerances.first_variation_slope",
                self.tolerances.first_variation_slope,
            ),
            (
                "tolerances.second_variation_slope",
                self.tolerances.second_variation_slope,
            ),
        ] {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(invalid(key, "expected [min, max]"));
            }
        }
        positive("accept.rates_n_steps", self.accept.rates_n_steps)?;
        positive("accept.rates_samples", self.accept.rates_samples)?;
        positive("accept.duality_samples", self.accept.duality_samples)?;
        positive("accept.single_mode_paths", self.accept.single_mode_paths)?;
        if let Some(f) = self.oracle.switch_fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return Err(invalid("oracle.switch_fractions", format!("{f} is outside (0, 1)")));
        }
        if let Some(p) = self.bdg.exponents.iter().find(|p| !(2.0..=8.0).contains(*p)) {
            return Err(invalid("bdg.exponents", format!("{p} is outside [2, 8]")));
        }
        let model = self.model().map_err(|e| match e {
            spde_smp::Error::UnknownScenario(_) => invalid("scenario", e.to_string()),
            other => invalid("params", other.to_string()),
        })?;
        for (key, u) in [("spike.base", self.spike.base), ("spike.v", self.spike.v)] {
            if !model.controls.contains(&u) {
                return Err(invalid(
                    key,
                    format!("{u} is not in the control set {:?}", model.controls),
                ));
            }
        }
        Ok(())
    }

    fn check_epsilons(&self, key: &str, [lo, hi]: [i32; 2], n_steps: usize) -> Result<(), ConfigError> {
        if hi - lo < 3 {
            return Err(invalid(
                key,
                "rate fits need at least four epsilons, [min, max] with max >= min + 3",
            ));
        }
        let dt = self.grid.horizon / n_steps as f64;
        let eps_min = 2f64.powi(-hi);
        let eps_max = 2f64.powi(-lo);
        if eps_min < 4.0 * dt * (1.0 - 1e-12) {
            return Err(invalid(
                key,
                format!("smallest epsilon {eps_min} is below 4 dt = {}", 4.0 * dt),
            ));
        }
        if !(self.spike.t0 > 0.0 && self.spike.t0 + eps_max < self.grid.horizon) {
            return Err(invalid(
                "spike.t0",
                format!("window [t0, t0 + {eps_max}] must lie inside (0, T)"),
            ));
        }
        Ok(())
    }

    pub fn space(&self) -> std::sync::Arc<SpectralSpace> {
        let n_points = self.grid.n_points.unwrap_or(2 * self.grid.n_modes);
        SpectralSpace::with_resolution(self.grid.n_modes, n_points, 1.0).expect("validated resolution")
    }

    pub fn model(&self) -> spde_smp::Result<ProblemModel> {
        build_scenario(&self.scenario, &self.params, &self.space(), self.grid.horizon)
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps).expect("validated grid")
    }

    pub fn seeds(&self) -> SeedPolicy {
        SeedPolicy::new(self.seed)
    }

    pub fn base_control(&self) -> ControlPath {
        ControlPath::Constant(self.spike.base)
    }

    pub fn basis(&self) -> BasisSpec {
        BasisSpec {
            n_inputs: self.adjoint.regression_inputs,
            degree: self.adjoint.regression_degree,
        }
    }

    pub fn fit_samples(&self) -> usize {
        self.adjoint.fit_samples
    }

    pub fn epsilons(&self) -> Vec<f64> {
        let [lo, hi] = self.spike.epsilon_exponents;
        dyadic_epsilons(lo, hi)
    }

    pub fn sweep(&self, final_duality: bool) -> SweepConfig {
        SweepConfig {
            t0: self.spike.t0,
            v: ControlPath::Constant(self.spike.v),
            epsilons: self.epsilons(),
            ensemble: self.ensemble.outer,
            p_first: self.spike.p_first,
            form: self.spike.form,
            final_duality_knots: final_duality.then_some(self.adjoint.final_duality_knots),
        }
    }

    pub fn mp_config(&self) -> MpConfig {
        MpConfig {
            knots: self.mp.knots,
            samples: self.mp.samples,
            branches: self.ensemble.inner,
            threshold: self.mp.threshold_se,
            ..MpConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_small_epsilons_need_fine_grids() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.spike.epsilon_exponents = [4, 9];
        let err = bad.validate().unwrap_err();
        assert!(err.to_string().contains("spike.epsilon_exponents"), "{err}");
        let mut bad = cfg;
        bad.accept.rates_n_steps = 1024;
        let err = bad.validate().unwrap_err();
        assert!(err.to_string().contains("accept.rates_epsilon_exponents"), "{err}");
    }

    #[test]
    fn round_trip_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.params.insert("beta".into(), 0.25);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_offending_key() {
        let cases = [
            ("scenario = \"lq\"\n[grid]\nn_steps = 0", "grid.n_steps"),
            ("scenario = \"nope\"", "scenario"),
            ("scenario = \"lq\"\n[params]\nbogus = 1.0", "bogus"),
            ("scenario = \"lq\"\n[spike]\nt0 = 0.95", "spike.t0"),
            ("scenario = \"lq\"\n[spike]\nv = 0.5", "spike.v"),
            ("scenario = \"lq\"\n[grid]\nwidth = 3", "width"),
        ];
        for (text, key) in cases {
            let err = ExperimentConfig::from_toml(text).unwrap_err().to_string();
            assert!(err.contains(key), "{key}: {err}");
        }
    }
}
