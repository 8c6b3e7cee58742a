//! Sweeps the transform thread count of a single saturated pipeline and
//! compares the delivered rate against the throughput curve.
//!
//! ```text
//! cargo run --example flow_balance
//! ```

use std::collections::BTreeMap;

use etlsim::engine::Schedule;
use etlsim::scenario::load_scenario;

const SCENARIO: &str = include_str!("scenarios/flow_balance.json");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sc = load_scenario(SCENARIO)?;
    let curve = *sc.file.edges[0].transform.curve().expect("gamma transform");
    let (ticks, window, warmup) = (20_000, 1_000, 2);

    println!(
        "{:>4} {:>10} {:>10} {:>7}",
        "a", "T(a)", "measured", "ratio"
    );
    for a in [1, 2, 4, 8, 16, 32] {
        let mut alloc = sc.initial_allocation().clone();
        alloc.patch(&sc.graph, &BTreeMap::from([("e1.T".to_string(), a)]))?;
        let mut sim = sc.simulation(None)?;
        let windows = sim.run(&Schedule::constant(alloc), ticks, window)?;
        let kept = &windows[warmup..];
        let delivered: u64 = kept.iter().map(|w| w.delivered()).sum();
        let secs = kept.iter().map(|w| w.ticks()).sum::<u64>() as f64 * sc.file.tick_ms / 1000.0;
        let measured = delivered as f64 / secs;
        let predicted = curve.eval(a as f64)?;
        println!(
            "{a:>4} {predicted:>10.2} {measured:>10.2} {:>7.3}",
            measured / predicted
        );
    }
    Ok(())
}
