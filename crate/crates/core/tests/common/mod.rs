#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use etlsim::engine::{ArrivalProcess, Simulation, WindowMetrics};
use etlsim::scenario::{ScenarioFile, ScheduleEntry, SCHEMA_VERSION};
use etlsim::stochastic::ProcTimeModel;
use etlsim::throughput::ConvenientCurve;
use etlsim::topology::{Capacity, EdgeSpec, PoolRole, PoolSpec, Routing};
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn instant() -> ProcTimeModel {
    ProcTimeModel::DeterministicTicks { ticks: 1 }
}

pub fn gamma(curve: ConvenientCurve, shape: f64) -> ProcTimeModel {
    ProcTimeModel::Gamma { curve, shape }
}

pub fn alloc(pairs: &[(&str, i64)]) -> BTreeMap<String, i64> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

/// Source `S`, target `T`, one edge `e1` with instantaneous extract and
/// load (64 threads each) and a gamma transform on
/// `100 (1 - exp(-a / 10))`, fed by a batch large enough never to run dry.
pub fn flow_balance_scenario(t_threads: i64) -> ScenarioFile {
    let curve = ConvenientCurve::exponential(100.0, 10.0).unwrap();
    ScenarioFile {
        schema_version: SCHEMA_VERSION,
        tick_ms: 1.0,
        seed: 20240601,
        pools: vec![
            PoolSpec::new("S", PoolRole::Source),
            PoolSpec::new("T", PoolRole::Target),
        ],
        edges: vec![EdgeSpec::new(
            "e1",
            "S",
            "T",
            instant(),
            gamma(curve, 4.0),
            instant(),
        )],
        routing: Routing::new(),
        arrivals: BTreeMap::from([("S".to_string(), ArrivalProcess::Batch { count: 20_000 })]),
        allocation: alloc(&[("e1.E", 64), ("e1.T", t_threads), ("e1.L", 64)]),
        schedule: vec![],
    }
}

/// Two pipelines in series, `S -> M -> T`, with transform curves `first`
/// and `second` at `a1` and `a2` threads. Pools and queues are unbounded.
pub fn series_scenario(
    first: ConvenientCurve,
    a1: i64,
    second: ConvenientCurve,
    a2: i64,
) -> ScenarioFile {
    let edge = |id: &str, from: &str, to: &str, curve| {
        EdgeSpec::new(id, from, to, instant(), gamma(curve, 4.0), instant())
            .with_queues(Capacity::Unbounded, Capacity::Unbounded)
    };
    ScenarioFile {
        schema_version: SCHEMA_VERSION,
        tick_ms: 1.0,
        seed: 77,
        pools: vec![
            PoolSpec::new("S", PoolRole::Source),
            PoolSpec::new("M", PoolRole::Intermediate),
            PoolSpec::new("T", PoolRole::Target),
        ],
        edges: vec![edge("e1", "S", "M", first), edge("e2", "M", "T", second)],
        routing: Routing::new(),
        arrivals: BTreeMap::from([("S".to_string(), ArrivalProcess::Batch { count: 20_000 })]),
        allocation: alloc(&[
            ("e1.E", 64),
            ("e1.T", a1),
            ("e1.L", 64),
            ("e2.E", 64),
            ("e2.T", a2),
            ("e2.L", 64),
        ]),
        schedule: vec![],
    }
}

/// Records per second delivered into target pools over the windows that
/// start at or after `warmup`.
pub fn delivered_rate(windows: &[WindowMetrics], warmup: u64, tick_ms: f64) -> f64 {
    let kept: Vec<_> = windows
        .iter()
        .filter(|w| w.window_start >= warmup)
        .collect();
    let delivered: u64 = kept.iter().map(|w| w.delivered()).sum();
    let ticks: u64 = kept.iter().map(|w| w.ticks()).sum();
    delivered as f64 / (ticks as f64 * tick_ms / 1000.0)
}

fn random_model(rng: &mut impl Rng, tick_ms: f64) -> ProcTimeModel {
    // curves whose mean time at one thread lies between ~1 and ~40 ticks
    let per_tick = 1000.0 / tick_ms;
    let t_max = per_tick * rng.random_range(0.05..2.0);
    let shape = rng.random_range(0.5..8.0);
    let curve = if rng.random_bool(0.5) {
        ConvenientCurve::exponential(t_max, shape).unwrap()
    } else {
        ConvenientCurve::rational(t_max, shape).unwrap()
    };
    match rng.random_range(0..4) {
        0 => ProcTimeModel::DeterministicTicks {
            ticks: rng.random_range(1..6),
        },
        1 => {
            let r_min = rng.random_range(1..4);
            ProcTimeModel::UniformTicks {
                r_min,
                r_max: r_min + rng.random_range(0..6),
            }
        }
        2 => ProcTimeModel::Gamma {
            curve,
            shape: rng.random_range(0.5..6.0),
        },
        _ => ProcTimeModel::Lognormal {
            curve,
            sigma: rng.random_range(0.1..1.2),
        },
    }
}

fn random_capacity(rng: &mut impl Rng, min: u64) -> Capacity {
    if rng.random_bool(0.3) {
        Capacity::Unbounded
    } else {
        Capacity::Bounded(rng.random_range(min..min + 30))
    }
}

fn random_queue(rng: &mut impl Rng) -> Capacity {
    if rng.random_bool(0.2) {
        Capacity::Bounded(0)
    } else {
        random_capacity(rng, 0)
    }
}

/// A random valid scenario with at most 5 pools and 6 edges: mixed
/// capacities (including zero-capacity queues), arrival processes,
/// routing modes, processing models and allocations, and sometimes a
/// schedule.
pub fn random_scenario(rng: &mut impl Rng) -> ScenarioFile {
    let n = rng.random_range(2..=5usize);
    let n_sources = if n >= 4 && rng.random_bool(0.4) { 2 } else { 1 };
    let n_targets = if n - n_sources >= 3 && rng.random_bool(0.4) {
        2
    } else {
        1
    };
    let role = |i: usize| {
        if i < n_sources {
            PoolRole::Source
        } else if i >= n - n_targets {
            PoolRole::Target
        } else {
            PoolRole::Intermediate
        }
    };
    let tick_ms = [1.0, 2.0, 5.0, 10.0][rng.random_range(0..4)];

    // every non-source gets an incoming edge and every non-target an
    // outgoing one; redraw until that fits in six edges
    let mut pairs: Vec<(usize, usize)> = loop {
        let mut pairs = Vec::new();
        for j in n_sources..n {
            let candidates: Vec<usize> = (0..j).filter(|&i| role(i) != PoolRole::Target).collect();
            pairs.push((*candidates.choose(rng).unwrap(), j));
        }
        for i in 0..n - n_targets {
            if !pairs.iter().any(|&(a, _)| a == i) {
                pairs.push((i, rng.random_range((i + 1).max(n_sources)..n)));
            }
        }
        if pairs.len() <= 6 {
            break pairs;
        }
    };
    let mut attempts = 0;
    while pairs.len() < 6 && attempts < 20 && rng.random_bool(0.5) {
        attempts += 1;
        let i = rng.random_range(0..n - n_targets);
        let j = rng.random_range((i + 1).max(n_sources)..n);
        if !pairs.contains(&(i, j)) {
            pairs.push((i, j));
        }
    }

    let pools: Vec<PoolSpec> = (0..n)
        .map(|i| {
            let p = PoolSpec::new(format!("P{i}"), role(i));
            if role(i) == PoolRole::Target {
                p
            } else {
                p.with_capacity(random_capacity(rng, 1))
            }
        })
        .collect();
    let mut edges = Vec::new();
    let mut allocation = BTreeMap::new();
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let id = format!("e{k}");
        let (qet, qtl) = (random_queue(rng), random_queue(rng));
        edges.push(
            EdgeSpec::new(
                &id,
                format!("P{i}"),
                format!("P{j}"),
                random_model(rng, tick_ms),
                random_model(rng, tick_ms),
                random_model(rng, tick_ms),
            )
            .with_queues(qet, qtl),
        );
        for s in ["E", "T", "L"] {
            allocation.insert(format!("{id}.{s}"), rng.random_range(0..6));
        }
    }

    let mut routing = Routing::new();
    for i in 0..n {
        let outs: Vec<usize> = (0..pairs.len()).filter(|&k| pairs[k].0 == i).collect();
        if outs.len() >= 2 && rng.random_bool(0.5) {
            routing.insert(
                format!("P{i}"),
                outs.iter()
                    .map(|&k| (format!("e{k}"), rng.random_range(0.1..3.0)))
                    .collect(),
            );
        }
    }

    let mut arrivals = BTreeMap::new();
    for i in 0..n_sources {
        let process = match rng.random_range(0..3) {
            0 => ArrivalProcess::Batch {
                count: rng.random_range(0..400),
            },
            1 => ArrivalProcess::DeterministicRate {
                period: rng.random_range(1..20),
            },
            _ => ArrivalProcess::Poisson {
                rate: rng.random_range(0.01..3.0),
            },
        };
        arrivals.insert(format!("P{i}"), process);
    }

    let schedule = if rng.random_bool(0.3) {
        let key = allocation.keys().next().unwrap().clone();
        vec![ScheduleEntry {
            from_tick: rng.random_range(1..5000),
            allocation: BTreeMap::from([(key, rng.random_range(0..8))]),
        }]
    } else {
        vec![]
    };

    ScenarioFile {
        schema_version: SCHEMA_VERSION,
        tick_ms,
        seed: rng.random(),
        pools,
        edges,
        routing,
        arrivals,
        allocation,
        schedule,
    }
}

/// Checks that every admitted record sits in exactly one phase, that its
/// own phase field agrees, and that arrivals minus drops equals the
/// population. Returns a description of the first discrepancy.
pub fn check_conservation(sim: &Simulation) -> Result<(), String> {
    let state = sim.state();
    let counters = state.counters();
    let admitted = counters.total_arrived() - counters.total_dropped();
    let population = state.total_population() as u64;
    if admitted != population {
        return Err(format!(
            "tick {}: admitted {admitted} but population {population}",
            state.tick()
        ));
    }
    if state.records().len() as u64 != admitted {
        return Err(format!(
            "tick {}: {} record ids for {admitted} admitted records",
            state.tick(),
            state.records().len()
        ));
    }
    let mut seen = HashSet::new();
    for phase in 0..state.phase_count() {
        for id in state.residents(phase) {
            if !seen.insert(id) {
                return Err(format!("tick {}: record {id} resident twice", state.tick()));
            }
            let rec = state.record(id).ok_or(format!("unknown record {id}"))?;
            if rec.phase != phase {
                return Err(format!(
                    "record {id} listed in phase {phase} but claims {}",
                    rec.phase
                ));
            }
        }
    }
    if seen.len() as u64 != admitted {
        return Err(format!(
            "{} resident ids for {admitted} records",
            seen.len()
        ));
    }
    Ok(())
}
