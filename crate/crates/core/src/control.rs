//! Control rules and spike perturbations.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spectral::SpectralField;
use crate::stochastics::TimeGrid;

/// `(knot, X_{t_k}) ↦ u`.
pub type FeedbackFn = Arc<dyn Fn(usize, &SpectralField) -> f64 + Send + Sync>;

/// A control rule. Every variant reads at most the current knot and state,
/// so the realized control is adapted by construction.
#[derive(Clone)]
pub enum ControlPath {
    Constant(f64),
    /// Deterministic open-loop table, one entry per step.
    Table(Vec<f64>),
    Feedback(FeedbackFn),
    /// `v` on knots `start..end`, `base` elsewhere.
    Spiked {
        base: Box<ControlPath>,
        replacement: Box<ControlPath>,
        start: usize,
        end: usize,
    },
}

impl fmt::Debug for ControlPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlPath::Constant(u) => write!(f, "Constant({u})"),
            ControlPath::Table(t) => write!(f, "Table(len {})", t.len()),
            ControlPath::Feedback(_) => write!(f, "Feedback"),
            ControlPath::Spiked {
                base,
                replacement,
                start,
                end,
            } => write!(f, "Spiked({base:?} <- {replacement:?} on {start}..{end})"),
        }
    }
}

impl ControlPath {
    /// Two-piece open-loop control switching from `first` to `second` at knot `switch`.
    pub fn two_piece(first: f64, second: f64, switch: usize, n_steps: usize) -> Self {
        ControlPath::Table((0..n_steps).map(|k| if k < switch { first } else { second }).collect())
    }

    pub fn value(&self, knot: usize, state: &SpectralField) -> f64 {
        match self {
            ControlPath::Constant(u) => *u,
            ControlPath::Table(t) => t[knot.min(t.len() - 1)],
            ControlPath::Feedback(f) => f(knot, state),
            ControlPath::Spiked {
                base,
                replacement,
                start,
                end,
            } => {
                if (*start..*end).contains(&knot) {
                    replacement.value(knot, state)
                } else {
                    base.value(knot, state)
                }
            }
        }
    }

    /// Whether the rule ignores the state.
    pub fn is_open_loop(&self) -> bool {
        match self {
            ControlPath::Constant(_) | ControlPath::Table(_) => true,
            ControlPath::Feedback(_) => false,
            ControlPath::Spiked { base, replacement, .. } => base.is_open_loop() && replacement.is_open_loop(),
        }
    }
}

/// Perturbation window `[t0, t0+ε]` with replacement control `v`.
#[derive(Debug, Clone)]
pub struct SpikeSpec {
    pub t0: f64,
    pub epsilon: f64,
    pub v: ControlPath,
}

/// Knot range `start..end` covered by a spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpikeWindow {
    pub start: usize,
    pub end: usize,
}

impl SpikeWindow {
    pub fn contains(&self, knot: usize) -> bool {
        (self.start..self.end).contains(&knot)
    }
}

/// Relative tolerance (in units of `Δt`) for snapping window ends to knots.
pub const SNAP_TOLERANCE: f64 = 1e-6;

impl SpikeSpec {
    pub fn new(t0: f64, epsilon: f64, v: ControlPath) -> Self {
        Self { t0, epsilon, v }
    }

    pub fn window(&self, grid: &TimeGrid) -> Result<SpikeWindow> {
        let (a, b) = (self.t0, self.t0 + self.epsilon);
        let err = |reason| Error::SpikeWindow {
            start: a,
            end: b,
            reason,
        };
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(err("epsilon must be positive"));
        }
        if !(a > 0.0 && b < grid.horizon()) {
            return Err(err("window must lie inside (0, T)"));
        }
        let start = grid.snap(a, SNAP_TOLERANCE).ok_or(err("start is off the time grid"))?;
        let end = grid.snap(b, SNAP_TOLERANCE).ok_or(err("end is off the time grid"))?;
        if end <= start {
            return Err(err("window shorter than one step"));
        }
        Ok(SpikeWindow { start, end })
    }
}

/// `u^ε`: `v` on the spike window, `u` elsewhere.
pub fn spike(u: &ControlPath, s: &SpikeSpec, grid: &TimeGrid) -> Result<ControlPath> {
    let w = s.window(grid)?;
    Ok(ControlPath::Spiked {
        base: Box::new(u.clone()),
        replacement: Box::new(s.v.clone()),
        start: w.start,
        end: w.end,
    })
}
