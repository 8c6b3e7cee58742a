//! Runs a scenario whose allocation schedule raises the transform thread
//! count twice while Poisson arrivals keep coming, and prints the backlog
//! building up and draining.
//!
//! ```text
//! cargo run --example allocation_schedule
//! ```

use etlsim::scenario::load_scenario;

const SCENARIO: &str = include_str!("scenarios/scheduled.json");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sc = load_scenario(SCENARIO)?;
    let mut sim = sc.simulation(None)?;
    let windows = sim.run(&sc.schedule, 9_000, 500)?;

    println!(
        "{:>6} {:>4} {:>11} {:>9} {:>8} {:>9}",
        "tick", "e1.T", "delivered/s", "S depth", "dropped", "p95 (ms)"
    );
    for w in &windows {
        let source = w.pool("S").expect("source pool");
        let target = w.pool("T").expect("target pool");
        let p95 = target.latency_p95.map_or("-".to_string(), |t| {
            format!("{:.0}", t as f64 * sc.file.tick_ms)
        });
        println!(
            "{:>6} {:>4} {:>11.1} {:>9.1} {:>8} {:>9}",
            w.window_start,
            w.phase("e1.T").expect("transform phase").threads,
            w.delivered_rate(sc.file.tick_ms),
            source.mean_depth,
            source.dropped,
            p95,
        );
    }
    Ok(())
}
