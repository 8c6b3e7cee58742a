//! Fitting throughput curves and processing-time distributions to
//! observations.
//!
//! Curves are fitted by damped least squares (Levenberg-Marquardt) on the
//! logarithms of both parameters, so fitted parameters are always positive.
//! Gamma distributions are fitted by moments, log-normals by their
//! log-space maximum-likelihood estimates.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma, LogNormal};
use thiserror::Error;

use crate::throughput::ConvenientCurve;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("need ≥ 3 observations, got {0}")]
    TooFewObservations(usize),
    #[error("need ≥ 2 distinct thread counts > 0")]
    TooFewDistinct,
    #[error("degenerate data: all observed throughput is zero")]
    AllZero,
    #[error("observation {0} is not finite and non-negative")]
    BadObservation(usize),
    #[error("need ≥ 10 samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples must be positive (sample {index} is {value})")]
    NonPositiveSample { index: usize, value: f64 },
    #[error("deterministic data: sample variance is zero")]
    DeterministicData,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputObservation {
    /// Threads.
    pub a: f64,
    /// Observed throughput, records per second.
    pub t_hat: f64,
}

impl ThroughputObservation {
    pub fn new(a: f64, t_hat: f64) -> Self {
        ThroughputObservation { a, t_hat }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveFamily {
    Exponential,
    Rational,
}

impl CurveFamily {
    fn build(self, bound: f64, shape: f64) -> ConvenientCurve {
        match self {
            CurveFamily::Exponential => ConvenientCurve::Exponential {
                t_max: bound,
                k: shape,
            },
            CurveFamily::Rational => ConvenientCurve::Rational { x: bound, y: shape },
        }
    }

    /// Fraction of the bound reached at `a = shape`: `1 - 1/e` or `1/2`.
    fn shape_fraction(self) -> f64 {
        match self {
            CurveFamily::Exponential => 0.63,
            CurveFamily::Rational => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveFit {
    pub curve: ConvenientCurve,
    pub rss: f64,
    pub iterations: u32,
    pub converged: bool,
    /// Norm of the least-squares gradient `J^T r` at the solution, in
    /// log-parameter coordinates.
    pub gradient_norm: f64,
}

const MAX_ITERATIONS: u32 = 1000;
const RSS_RTOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-9;
/// Scale-free optimality: |J^T r| <= GRAD_COS_TOL * |J| * |r|.
const GRAD_COS_TOL: f64 = 1e-4;

struct Linearization {
    rss: f64,
    /// J^T J (symmetric 2x2, stored as [a, b, c] for [[a, b], [b, c]])
    jtj: [f64; 3],
    jtr: [f64; 2],
    j_norm: f64,
}

fn model(family: CurveFamily, bound: f64, shape: f64, a: f64) -> (f64, f64) {
    // value and derivative with respect to ln(shape); d/d ln(bound) is the value
    match family {
        CurveFamily::Exponential => {
            let e = (-a / shape).exp();
            (bound * -(-a / shape).exp_m1(), -bound * (a / shape) * e)
        }
        CurveFamily::Rational => {
            let d = shape + a;
            (bound * a / d, -bound * a * shape / (d * d))
        }
    }
}

fn rss_at(obs: &[ThroughputObservation], family: CurveFamily, theta: [f64; 2]) -> f64 {
    let (b, s) = (theta[0].exp(), theta[1].exp());
    obs.iter()
        .map(|o| {
            let r = o.t_hat - model(family, b, s, o.a).0;
            r * r
        })
        .sum()
}

fn linearize(obs: &[ThroughputObservation], family: CurveFamily, theta: [f64; 2]) -> Linearization {
    let (b, s) = (theta[0].exp(), theta[1].exp());
    let mut out = Linearization {
        rss: 0.0,
        jtj: [0.0; 3],
        jtr: [0.0; 2],
        j_norm: 0.0,
    };
    for o in obs {
        let (f, ds) = model(family, b, s, o.a);
        let r = o.t_hat - f;
        let j = [f, ds];
        out.rss += r * r;
        out.jtj[0] += j[0] * j[0];
        out.jtj[1] += j[0] * j[1];
        out.jtj[2] += j[1] * j[1];
        out.jtr[0] += j[0] * r;
        out.jtr[1] += j[1] * r;
    }
    out.j_norm = (out.jtj[0] + out.jtj[2]).sqrt();
    out
}

/// Initial `(bound, shape)` guess from the data.
fn initial_guess(obs: &[ThroughputObservation], family: CurveFamily) -> (f64, f64) {
    let mut sorted: Vec<_> = obs.to_vec();
    sorted.sort_by(|x, y| x.a.total_cmp(&y.a));
    let max_t = sorted.iter().map(|o| o.t_hat).fold(0.0, f64::max);
    let bound = 1.05 * max_t;
    let threshold = family.shape_fraction() * bound;
    let (mut pa, mut pt) = (0.0, 0.0);
    let mut shape = sorted.last().map_or(1.0, |o| o.a);
    for o in &sorted {
        if o.t_hat > threshold {
            shape = if o.t_hat > pt {
                pa + (threshold - pt) / (o.t_hat - pt) * (o.a - pa)
            } else {
                o.a
            };
            break;
        }
        (pa, pt) = (o.a, o.t_hat);
    }
    let min_pos = sorted
        .iter()
        .map(|o| o.a)
        .filter(|&a| a > 0.0)
        .fold(f64::INFINITY, f64::min);
    (bound, shape.max(1e-3 * min_pos))
}

/// Fits `family` to `(a, t_hat)` observations by damped least squares.
///
/// Starts from bound `1.05 * max t_hat` and shape at the interpolated `a`
/// where throughput first exceeds 63% (exponential) or 50% (rational) of
/// that bound. Damping starts at `1e-3` and is divided by 10 after each
/// accepted step, multiplied by 10 after each rejected one. Stops when the
/// relative RSS improvement drops below `1e-10`, the step below `1e-9`, or
/// after 1000 iterations.
pub fn fit_curve(
    observations: &[ThroughputObservation],
    family: CurveFamily,
) -> Result<CurveFit, CalibrationError> {
    if observations.len() < 3 {
        return Err(CalibrationError::TooFewObservations(observations.len()));
    }
    for (i, o) in observations.iter().enumerate() {
        if !(o.a.is_finite() && o.t_hat.is_finite() && o.a >= 0.0 && o.t_hat >= 0.0) {
            return Err(CalibrationError::BadObservation(i));
        }
    }
    let mut distinct: Vec<f64> = observations
        .iter()
        .map(|o| o.a)
        .filter(|&a| a > 0.0)
        .collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(CalibrationError::TooFewDistinct);
    }
    if observations.iter().all(|o| o.t_hat == 0.0) {
        return Err(CalibrationError::AllZero);
    }

    let (b0, s0) = initial_guess(observations, family);
    let mut theta = [b0.ln(), s0.ln()];
    let mut lin = linearize(observations, family, theta);
    let y_norm2: f64 = observations.iter().map(|o| o.t_hat * o.t_hat).sum();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut stopped = false;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if lin.rss <= 1e-30 * y_norm2 {
            stopped = true;
            break;
        }
        let d0 = lin.jtj[0].max(1e-300);
        let d2 = lin.jtj[2].max(1e-300);
        let (a, b, c) = (
            lin.jtj[0] + lambda * d0,
            lin.jtj[1],
            lin.jtj[2] + lambda * d2,
        );
        let det = a * c - b * b;
        let step = if det.abs() > 0.0 && det.is_finite() {
            [
                (c * lin.jtr[0] - b * lin.jtr[1]) / det,
                (a * lin.jtr[1] - b * lin.jtr[0]) / det,
            ]
        } else {
            [0.0, 0.0]
        };
        let step_norm = step[0].hypot(step[1]);
        let candidate = [theta[0] + step[0], theta[1] + step[1]];
        let rss_new = rss_at(observations, family, candidate);
        if rss_new.is_finite() && rss_new < lin.rss {
            let rel = (lin.rss - rss_new) / lin.rss;
            theta = candidate;
            lin = linearize(observations, family, theta);
            lambda = (lambda / 10.0).max(1e-12);
            if rel < RSS_RTOL || step_norm < STEP_TOL {
                stopped = true;
                break;
            }
        } else {
            if step_norm < STEP_TOL {
                stopped = true;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                stopped = true;
                break;
            }
        }
    }

    let gradient_norm = lin.jtr[0].hypot(lin.jtr[1]);
    let optimal =
        gradient_norm <= GRAD_COS_TOL * lin.j_norm * lin.rss.sqrt() || lin.rss <= 1e-30 * y_norm2;
    Ok(CurveFit {
        curve: family.build(theta[0].exp(), theta[1].exp()),
        rss: lin.rss,
        iterations,
        converged: stopped && optimal,
        gradient_norm,
    })
}

/// A fitted processing-time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum FittedDistribution {
    Gamma { shape: f64, scale: f64 },
    Lognormal { mu: f64, sigma: f64 },
}

impl FittedDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            FittedDistribution::Gamma { shape, scale } => shape * scale,
            FittedDistribution::Lognormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            FittedDistribution::Gamma { shape, scale } => match Gamma::new(shape, 1.0 / scale) {
                Ok(g) => g.cdf(x),
                Err(_) => f64::NAN,
            },
            FittedDistribution::Lognormal { mu, sigma: 0.0 } => {
                if x >= mu.exp() {
                    1.0
                } else {
                    0.0
                }
            }
            FittedDistribution::Lognormal { mu, sigma } => match LogNormal::new(mu, sigma) {
                Ok(l) => l.cdf(x),
                Err(_) => f64::NAN,
            },
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            FittedDistribution::Gamma { shape, scale } => match Gamma::new(shape, 1.0 / scale) {
                Ok(g) => g.ln_pdf(x),
                Err(_) => f64::NAN,
            },
            FittedDistribution::Lognormal { mu, sigma: 0.0 } => {
                if x == mu.exp() {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                }
            }
            FittedDistribution::Lognormal { mu, sigma } => match LogNormal::new(mu, sigma) {
                Ok(l) => l.ln_pdf(x),
                Err(_) => f64::NAN,
            },
        }
    }
}

fn check_samples(samples: &[f64], min: usize) -> Result<(), CalibrationError> {
    if samples.len() < min {
        return Err(CalibrationError::TooFewSamples(samples.len()));
    }
    for (index, &value) in samples.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(CalibrationError::NonPositiveSample { index, value });
        }
    }
    Ok(())
}

/// Method-of-moments Gamma fit: `shape = mean^2 / var`, `scale = var / mean`.
pub fn fit_gamma(samples: &[f64]) -> Result<FittedDistribution, CalibrationError> {
    check_samples(samples, 10)?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var.is_nan() || var <= 0.0 {
        return Err(CalibrationError::DeterministicData);
    }
    Ok(FittedDistribution::Gamma {
        shape: mean * mean / var,
        scale: var / mean,
    })
}

/// Log-normal fit from the mean and (population) standard deviation of
/// `ln x`. Constant data yields `sigma = 0`.
pub fn fit_lognormal(samples: &[f64]) -> Result<FittedDistribution, CalibrationError> {
    check_samples(samples, 10)?;
    let n = samples.len() as f64;
    let shift = samples[0].ln();
    let offset = samples.iter().map(|x| x.ln() - shift).sum::<f64>() / n;
    let mu = shift + offset;
    let var = samples
        .iter()
        .map(|x| (x.ln() - shift - offset).powi(2))
        .sum::<f64>()
        / n;
    Ok(FittedDistribution::Lognormal {
        mu,
        sigma: var.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GoodnessOfFit {
    pub log_likelihood: f64,
    pub ks_statistic: f64,
}

/// Log-likelihood of `samples` under `dist` and the Kolmogorov-Smirnov
/// distance between their empirical CDF and the model CDF.
pub fn goodness_of_fit(
    samples: &[f64],
    dist: &FittedDistribution,
) -> Result<GoodnessOfFit, CalibrationError> {
    if samples.len() < 10 {
        return Err(CalibrationError::TooFewSamples(samples.len()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut ks = 0.0_f64;
    let mut i = 0;
    while i < sorted.len() {
        // ties form one jump of the empirical CDF
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let f = dist.cdf(sorted[i]);
        ks = ks
            .max((f - i as f64 / n).abs())
            .max(((j + 1) as f64 / n - f).abs());
        i = j + 1;
    }
    let log_likelihood = sorted.iter().map(|&x| dist.ln_pdf(x)).sum();
    Ok(GoodnessOfFit {
        log_likelihood,
        ks_statistic: ks.min(1.0),
    })
}
