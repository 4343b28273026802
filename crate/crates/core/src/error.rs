use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("fields live on different spectral spaces ({left} vs {right})")]
    GridMismatch { left: String, right: String },

    #[error("knot index {index} outside 0..={n_steps}")]
    KnotOutOfRange { index: usize, n_steps: usize },

    #[error("spike window [{start}, {end}] does not fit on the time grid: {reason}")]
    SpikeWindow { start: f64, end: f64, reason: &'static str },

    #[error("non-finite value in {what} at knot {knot} (sample {sample})")]
    BlowUp {
        what: &'static str,
        knot: usize,
        sample: u64,
    },

    #[error("rate fit needs at least {needed} positive points, got {got}")]
    RateFit { needed: usize, got: usize },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_param(name: &'static str, value: f64, ok: bool, reason: &'static str) -> Result<()> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter { name, value, reason })
    }
}
