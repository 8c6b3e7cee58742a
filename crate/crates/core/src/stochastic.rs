//! Per-record processing-time models and seeded random streams.
//!
//! Curve-backed models draw a continuous time in seconds whose expectation is
//! the flow-balance mean `R(a) = a / T(a)`:
//!
//! * Gamma with shape `alpha` and scale `R(a) / alpha`,
//! * log-normal with `sigma` and `mu = ln R(a) - sigma^2 / 2`.
//!
//! Draws become whole ticks by rounding half-up, clamped to at least one
//! tick. The extract-style models (`uniform_ticks`, `deterministic_ticks`)
//! are specified directly in ticks and ignore the thread count.
//!
//! # Random streams
//!
//! Every consumer of randomness owns an [`RngStream`]: a ChaCha8 generator
//! keyed by `seed_from_u64(seed)` and switched to stream number
//! `(phase << 8) | purpose`. Streams are therefore reproducible no matter in
//! which order the engine happens to poll them.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::throughput::ConvenientCurve;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("curve-based model needs at least one thread, got {0}")]
    NoThreads(u32),
    #[error("{0} model is specified in ticks; use sample_ticks")]
    TickNative(&'static str),
    #[error("tick length must be > 0 ms, got {0}")]
    BadTick(f64),
    #[error("invalid model parameter {path}: {message}")]
    BadModel { path: String, message: String },
}

/// A phase's processing-time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcTimeModel {
    Gamma { curve: ConvenientCurve, shape: f64 },
    Lognormal { curve: ConvenientCurve, sigma: f64 },
    UniformTicks { r_min: u64, r_max: u64 },
    DeterministicTicks { ticks: u64 },
}

impl ProcTimeModel {
    pub fn name(&self) -> &'static str {
        match self {
            ProcTimeModel::Gamma { .. } => "gamma",
            ProcTimeModel::Lognormal { .. } => "lognormal",
            ProcTimeModel::UniformTicks { .. } => "uniform_ticks",
            ProcTimeModel::DeterministicTicks { .. } => "deterministic_ticks",
        }
    }

    pub fn curve(&self) -> Option<&ConvenientCurve> {
        match self {
            ProcTimeModel::Gamma { curve, .. } | ProcTimeModel::Lognormal { curve, .. } => {
                Some(curve)
            }
            _ => None,
        }
    }

    /// Parameter problems as `(relative field path, message)` pairs.
    pub fn issues(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(curve) = self.curve() {
            let (names, (p, q)) = match curve {
                ConvenientCurve::Exponential { .. } => (["t_max", "k"], curve.params()),
                ConvenientCurve::Rational { .. } => (["x", "y"], curve.params()),
            };
            for (name, v) in names.into_iter().zip([p, q]) {
                if !(v > 0.0 && v.is_finite()) {
                    out.push((format!("curve.{name}"), "must be > 0".to_string()));
                }
            }
        }
        match *self {
            ProcTimeModel::Gamma { shape, .. } if !(shape > 0.0 && shape.is_finite()) => {
                out.push(("shape".into(), "must be > 0".into()));
            }
            ProcTimeModel::Lognormal { sigma, .. } if !(sigma > 0.0 && sigma.is_finite()) => {
                out.push(("sigma".into(), "must be > 0".into()));
            }
            ProcTimeModel::UniformTicks { r_min, r_max } => {
                if r_min < 1 {
                    out.push(("r_min".into(), "must be >= 1".into()));
                }
                if r_max < r_min {
                    out.push(("r_max".into(), "must be >= r_min".into()));
                }
            }
            ProcTimeModel::DeterministicTicks { ticks } if ticks < 1 => {
                out.push(("ticks".into(), "must be >= 1".into()));
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        match self.issues().into_iter().next() {
            None => Ok(()),
            Some((path, message)) => Err(SampleError::BadModel { path, message }),
        }
    }

    /// Mean processing time in seconds at `a` threads for curve-backed
    /// models.
    pub fn mean_seconds(&self, a: u32) -> Result<f64, SampleError> {
        let curve = self.curve().ok_or(SampleError::TickNative(self.name()))?;
        if a < 1 {
            return Err(SampleError::NoThreads(a));
        }
        Ok(f64::from(a) / curve.eval_unchecked(f64::from(a)))
    }
}

/// Draws one processing time in seconds from a curve-backed model.
pub fn sample_seconds<R: RngCore + ?Sized>(
    model: &ProcTimeModel,
    a: u32,
    rng: &mut R,
) -> Result<f64, SampleError> {
    let mean = model.mean_seconds(a)?;
    let bad = |path: &str| SampleError::BadModel {
        path: path.into(),
        message: "must be > 0".into(),
    };
    let x = match *model {
        ProcTimeModel::Gamma { shape, .. } => Gamma::new(shape, mean / shape)
            .map_err(|_| bad("shape"))?
            .sample(rng),
        ProcTimeModel::Lognormal { sigma, .. } => {
            LogNormal::new(mean.ln() - 0.5 * sigma * sigma, sigma)
                .map_err(|_| bad("sigma"))?
                .sample(rng)
        }
        _ => unreachable!("mean_seconds rejects tick-native models"),
    };
    // Gamma with a tiny shape can underflow to zero
    Ok(x.max(f64::MIN_POSITIVE))
}

/// Converts seconds to ticks: round half-up, at least one tick.
pub fn seconds_to_ticks(seconds: f64, tick_ms: f64) -> u64 {
    let ticks = (seconds * 1000.0 / tick_ms + 0.5).floor();
    if ticks < 1.0 {
        1
    } else {
        ticks as u64
    }
}

/// Draws the number of ticks a record spends in a phase.
pub fn sample_ticks<R: RngCore + ?Sized>(
    model: &ProcTimeModel,
    a: u32,
    tick_ms: f64,
    rng: &mut R,
) -> Result<u64, SampleError> {
    if !(tick_ms > 0.0 && tick_ms.is_finite()) {
        return Err(SampleError::BadTick(tick_ms));
    }
    match *model {
        ProcTimeModel::DeterministicTicks { ticks } => Ok(ticks.max(1)),
        ProcTimeModel::UniformTicks { r_min, r_max } => {
            let lo = r_min.max(1);
            let hi = r_max.max(lo);
            Ok(lo + uniform_below(rng, hi - lo + 1))
        }
        _ => Ok(seconds_to_ticks(sample_seconds(model, a, rng)?, tick_ms)),
    }
}

/// Unbiased integer in `[0, n)` by rejection.
fn uniform_below<R: RngCore + ?Sized>(rng: &mut R, n: u64) -> u64 {
    debug_assert!(n > 0);
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % n;
        }
    }
}

/// What a random stream is used for. Part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    ProcessingTime = 1,
    Arrivals = 2,
    Routing = 3,
    EdgeOrder = 4,
    Auxiliary = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub phase: u32,
    pub purpose: Purpose,
}

impl StreamId {
    pub fn new(phase: usize, purpose: Purpose) -> Self {
        StreamId {
            phase: u32::try_from(phase).expect("phase index fits in u32"),
            purpose,
        }
    }

    fn code(self) -> u64 {
        (u64::from(self.phase) << 8) | self.purpose as u64
    }
}

/// A seeded, independently reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id.code());
        RngStream { rng }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
