//! A source split 3:1 between two pipelines by routing weights. Each
//! record draws its edge on arrival, so the delivered shares follow the
//! weights rather than the pipelines' relative speed.
//!
//! ```text
//! cargo run --example weighted_routing
//! ```

use etlsim::scenario::load_scenario;

const SCENARIO: &str = include_str!("scenarios/weighted_routing.json");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sc = load_scenario(SCENARIO)?;
    let weights = &sc.file.routing["S"];
    let total_weight: f64 = weights.values().sum();

    let mut sim = sc.simulation(None)?;
    let windows = sim.run(&sc.schedule, 40_000, 4_000)?;
    let delivered = |pool: &str| -> u64 {
        windows
            .iter()
            .map(|w| w.pool(pool).map_or(0, |p| p.delivered))
            .sum()
    };
    let (a, b) = (delivered("A"), delivered("B"));
    println!("delivered to A: {a}, to B: {b}");
    println!(
        "share of A: {:.3} (weights give {:.3})",
        a as f64 / (a + b) as f64,
        weights["to_a"] / total_weight
    );
    Ok(())
}
