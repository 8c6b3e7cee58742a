//! Two pipelines in series through a bounded intermediate pool. The chain
//! delivers at the rate of its slowest transform. Once the pool fills, the
//! faster upstream pipeline blocks and slows to match. Adding threads at
//! the bottleneck moves it upstream.
//!
//! ```text
//! cargo run --example bottleneck_chain
//! ```

use std::collections::BTreeMap;

use etlsim::engine::{Schedule, WindowMetrics};
use etlsim::scenario::{load_scenario, Scenario};

const SCENARIO: &str = include_str!("scenarios/bottleneck_chain.json");

fn report(
    sc: &Scenario,
    label: &str,
    windows: &[WindowMetrics],
) -> Result<(), Box<dyn std::error::Error>> {
    let kept = &windows[6..];
    let secs = kept.iter().map(|w| w.ticks()).sum::<u64>() as f64 * sc.file.tick_ms / 1000.0;
    let rate = |edge: &str| {
        let key = format!("{edge}.L");
        kept.iter()
            .map(|w| w.phase(&key).map_or(0, |p| p.completed))
            .sum::<u64>() as f64
            / secs
    };
    let last = windows.last().expect("at least one window");
    println!("{label}");
    for (i, edge) in sc.file.edges.iter().enumerate() {
        let a = last
            .phase(&format!("{}.T", edge.id))
            .map_or(0, |p| p.threads);
        let bound = edge
            .transform
            .curve()
            .expect("curve-backed transform")
            .eval(a as f64)?;
        let blocked: u64 = kept
            .iter()
            .map(|w| {
                w.phase(&format!("{}.T", edge.id))
                    .map_or(0, |p| p.blocked_thread_ticks)
            })
            .sum();
        println!(
            "  {:<3} a={a:<3} T(a)={bound:>6.2}  loaded {:>6.2} rec/s  blocked T thread-ticks {blocked}",
            edge.id,
            rate(&edge.id),
        );
        if i == 0 {
            println!(
                "  M mean depth at end: {:.1}",
                last.pool("M").map_or(0.0, |p| p.mean_depth)
            );
        }
    }
    let delivered: u64 = kept.iter().map(|w| w.delivered()).sum();
    println!("  chain delivers {:.2} rec/s", delivered as f64 / secs);
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sc = load_scenario(SCENARIO)?;
    let mut sim = sc.simulation(None)?;
    let windows = sim.run(&sc.schedule, 160_000, 10_000)?;
    report(&sc, "as configured (e2 is the bottleneck):", &windows)?;

    let mut alloc = sc.initial_allocation().clone();
    alloc.patch(&sc.graph, &BTreeMap::from([("e2.T".to_string(), 16)]))?;
    let mut sim = sc.simulation(None)?;
    let windows = sim.run(&Schedule::constant(alloc), 160_000, 10_000)?;
    report(&sc, "with e2.T = 16 (e1 becomes the bottleneck):", &windows)?;
    Ok(())
}
