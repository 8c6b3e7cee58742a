//! Bounded monotone mean-throughput curves and the Flow Balance relation.
//!
//! A curve `T(a)` maps a (real-valued) thread count to mean throughput in
//! records per second. Every curve here starts at `T(0) = 0`, is
//! non-decreasing, and is bounded by its supremum. The mean per-record
//! processing time follows from flow balance, `a = T(a) * R(a)`, i.e.
//! `R(a) = a / T(a)` for `a > 0`.
//!
//! Only the two closed-form families are provided. General bounded rational
//! curves of higher degree would slot in as further [`ConvenientCurve`]
//! variants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CurveError {
    #[error("{name} must be > 0 and finite, got {value}")]
    BadParameter { name: &'static str, value: f64 },
    #[error("thread count must be finite and >= 0, got {0}")]
    NegativeThreads(f64),
    #[error("mean processing time needs a > 0, got {0}")]
    NonPositiveThreads(f64),
    #[error("grid must be sorted by thread count")]
    UnsortedGrid,
}

/// A mean-throughput curve from one of the two parametric families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConvenientCurve {
    /// `t_max * (1 - exp(-a / k))`
    Exponential { t_max: f64, k: f64 },
    /// `x * a / (y + a)`
    Rational { x: f64, y: f64 },
}

fn positive(name: &'static str, value: f64) -> Result<(), CurveError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(CurveError::BadParameter { name, value })
    }
}

impl ConvenientCurve {
    pub fn exponential(t_max: f64, k: f64) -> Result<Self, CurveError> {
        positive("t_max", t_max)?;
        positive("k", k)?;
        Ok(ConvenientCurve::Exponential { t_max, k })
    }

    pub fn rational(x: f64, y: f64) -> Result<Self, CurveError> {
        positive("x", x)?;
        positive("y", y)?;
        Ok(ConvenientCurve::Rational { x, y })
    }

    /// Re-checks the parameter invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<(), CurveError> {
        match *self {
            ConvenientCurve::Exponential { t_max, k } => {
                positive("t_max", t_max).and(positive("k", k))
            }
            ConvenientCurve::Rational { x, y } => positive("x", x).and(positive("y", y)),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            ConvenientCurve::Exponential { .. } => "exponential",
            ConvenientCurve::Rational { .. } => "rational",
        }
    }

    /// Parameters as `(bound, shape)`: `(t_max, k)` or `(x, y)`.
    pub fn params(&self) -> (f64, f64) {
        match *self {
            ConvenientCurve::Exponential { t_max, k } => (t_max, k),
            ConvenientCurve::Rational { x, y } => (x, y),
        }
    }

    /// Mean throughput at `a` threads, records per second.
    pub fn eval(&self, a: f64) -> Result<f64, CurveError> {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(CurveError::NegativeThreads(a));
        }
        Ok(self.eval_unchecked(a))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: f64) -> f64 {
        match *self {
            // -expm1 keeps full precision for small a/k and gives T(0) = 0 exactly
            ConvenientCurve::Exponential { t_max, k } => t_max * -(-a / k).exp_m1(),
            ConvenientCurve::Rational { x, y } => x * a / (y + a),
        }
    }

    /// `lim_{a -> inf} T(a)`.
    pub fn supremum(&self) -> f64 {
        self.params().0
    }

    /// Mean per-record processing time in seconds, `R(a) = a / T(a)`.
    pub fn mean_processing_time(&self, a: f64) -> Result<f64, CurveError> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(CurveError::NonPositiveThreads(a));
        }
        Ok(a / self.eval_unchecked(a))
    }

    /// `lim_{a -> 0+} R(a)`: `k / t_max` or `y / x`.
    pub fn mean_processing_time_at_zero(&self) -> f64 {
        match *self {
            ConvenientCurve::Exponential { t_max, k } => k / t_max,
            ConvenientCurve::Rational { x, y } => y / x,
        }
    }
}

/// Result of [`check_convenient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvenienceReport {
    pub monotone: bool,
    pub bounded: bool,
    /// Largest decrease between consecutive values, or largest excess over
    /// the supremum, whichever is larger. Zero for a clean grid.
    pub max_violation: f64,
}

/// Grid-based surrogate for membership in the space of convenient curves:
/// values must not decrease between consecutive grid points and must not
/// exceed `supremum`. Tolerance is `1e-12` times the largest magnitude seen.
pub fn check_convenient(
    grid: &[(f64, f64)],
    supremum: f64,
) -> Result<ConvenienceReport, CurveError> {
    if grid.windows(2).any(|w| w[1].0 < w[0].0) || grid.iter().any(|p| p.0 < 0.0) {
        return Err(CurveError::UnsortedGrid);
    }
    let scale = grid
        .iter()
        .map(|p| p.1.abs())
        .fold(supremum.abs(), f64::max)
        .max(1.0);
    let tol = 1e-12 * scale;
    let mut max_violation = 0.0_f64;
    let mut monotone = true;
    for w in grid.windows(2) {
        let drop = w[0].1 - w[1].1;
        if drop > tol {
            monotone = false;
        }
        max_violation = max_violation.max(drop);
    }
    let mut bounded = true;
    for &(_, v) in grid {
        let excess = v - supremum;
        if excess > tol || !v.is_finite() {
            bounded = false;
        }
        max_violation = max_violation.max(excess);
    }
    Ok(ConvenienceReport {
        monotone,
        bounded,
        max_violation: max_violation.max(0.0),
    })
}

/// Samples `curve` at each point of `at`.
pub fn tabulate(curve: &ConvenientCurve, at: impl IntoIterator<Item = f64>) -> Vec<(f64, f64)> {
    at.into_iter()
        .map(|a| (a, curve.eval_unchecked(a)))
        .collect()
}
