use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::stochastic::RngStream;

/// How records enter a source pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    /// `count` records present at tick 0.
    Batch { count: u64 },
    /// One record every `period` ticks, starting at tick 0.
    DeterministicRate { period: u64 },
    /// A Poisson number of records per tick with mean `rate`.
    Poisson { rate: f64 },
}

impl ArrivalProcess {
    pub fn issues(&self) -> Vec<(String, String)> {
        match *self {
            ArrivalProcess::Batch { .. } => vec![],
            ArrivalProcess::DeterministicRate { period } if period < 1 => {
                vec![("period".into(), "must be >= 1".into())]
            }
            ArrivalProcess::Poisson { rate } if !(rate > 0.0 && rate.is_finite()) => {
                vec![("rate".into(), "must be > 0".into())]
            }
            _ => vec![],
        }
    }

    /// Records arriving at the start of tick `tick` (excluding the initial
    /// batch, which is materialized at construction).
    pub(crate) fn count_at(&self, tick: u64, rng: &mut RngStream) -> u64 {
        match *self {
            ArrivalProcess::Batch { .. } => 0,
            ArrivalProcess::DeterministicRate { period } => {
                u64::from(tick.is_multiple_of(period.max(1)))
            }
            ArrivalProcess::Poisson { rate } => match Poisson::new(rate) {
                Ok(p) => {
                    let n: f64 = p.sample(rng);
                    n as u64
                }
                Err(_) => 0,
            },
        }
    }

    pub(crate) fn initial(&self) -> u64 {
        match *self {
            ArrivalProcess::Batch { count } => count,
            _ => 0,
        }
    }
}
