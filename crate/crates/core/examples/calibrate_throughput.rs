//! Measures delivered throughput of a simulated pipeline at several thread
//! counts, then fits both curve families to the measurements, the way one
//! would calibrate against benchmarks of a real system.
//!
//! ```text
//! cargo run --example calibrate_throughput
//! ```

use std::collections::BTreeMap;

use etlsim::calibration::{fit_curve, CurveFamily, ThroughputObservation};
use etlsim::engine::Schedule;
use etlsim::scenario::{load_scenario, write_throughput_csv};

const SCENARIO: &str = include_str!("scenarios/flow_balance.json");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sc = load_scenario(SCENARIO)?;
    let truth = *sc.file.edges[0].transform.curve().expect("gamma transform");

    let mut observations = Vec::new();
    for a in [1, 2, 3, 4, 6, 8, 12, 16, 24] {
        let mut alloc = sc.initial_allocation().clone();
        alloc.patch(&sc.graph, &BTreeMap::from([("e1.T".to_string(), a)]))?;
        let mut sim = sc.simulation(Some(1000 + a as u64))?;
        let windows = sim.run(&Schedule::constant(alloc), 12_000, 1_000)?;
        let kept = &windows[2..];
        let delivered: u64 = kept.iter().map(|w| w.delivered()).sum();
        let secs = kept.iter().map(|w| w.ticks()).sum::<u64>() as f64 * sc.file.tick_ms / 1000.0;
        observations.push(ThroughputObservation::new(
            a as f64,
            delivered as f64 / secs,
        ));
    }
    print!("measurements:\n{}", write_throughput_csv(&observations));

    let (t_max, k) = truth.params();
    println!("\ntrue curve: {} t_max={t_max} k={k}", truth.family_name());
    for family in [CurveFamily::Exponential, CurveFamily::Rational] {
        let fit = fit_curve(&observations, family)?;
        let (p, q) = fit.curve.params();
        println!(
            "{:<12} params ({p:.3}, {q:.3})  rss {:.3}  converged {} in {} iterations",
            fit.curve.family_name(),
            fit.rss,
            fit.converged,
            fit.iterations
        );
    }
    Ok(())
}
