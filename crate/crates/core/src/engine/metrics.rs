use serde::{Deserialize, Serialize};

use super::allocation::{slot, Allocation};
use crate::topology::{PhaseGraph, PoolRole, Stage};

/// Per-pool figures over one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolWindow {
    pub id: String,
    pub role: PoolRole,
    /// Records loaded into the pool during the window. For a target pool
    /// this is the increase of its population.
    pub delivered: u64,
    pub arrived: u64,
    pub dropped: u64,
    pub mean_depth: f64,
    /// Source-to-target latency of records delivered in the window, ticks.
    pub latency_p50: Option<u64>,
    pub latency_p95: Option<u64>,
}

/// Per processing phase (E, T or L of one edge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseWindow {
    pub phase: String,
    /// Thread allocation in force at the end of the window.
    pub threads: u32,
    pub mean_occupancy: f64,
    pub blocked_thread_ticks: u64,
    /// Records that left the phase during the window.
    pub completed: u64,
    /// Mean ticks between admission and departure of those records.
    pub mean_residence_ticks: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueWindow {
    pub queue: String,
    pub mean_depth: f64,
}

/// Aggregated statistics over ticks `[window_start, window_end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window_start: u64,
    pub window_end: u64,
    pub pools: Vec<PoolWindow>,
    pub phases: Vec<PhaseWindow>,
    pub queues: Vec<QueueWindow>,
}

impl WindowMetrics {
    pub fn ticks(&self) -> u64 {
        self.window_end - self.window_start
    }

    pub fn pool(&self, id: &str) -> Option<&PoolWindow> {
        self.pools.iter().find(|p| p.id == id)
    }

    pub fn phase(&self, key: &str) -> Option<&PhaseWindow> {
        self.phases.iter().find(|p| p.phase == key)
    }

    /// Records delivered into all target pools.
    pub fn delivered(&self) -> u64 {
        self.pools
            .iter()
            .filter(|p| p.role == PoolRole::Target)
            .map(|p| p.delivered)
            .sum()
    }

    /// Target-pool deliveries per second of simulated time.
    pub fn delivered_rate(&self, tick_ms: f64) -> f64 {
        let secs = self.ticks() as f64 * tick_ms / 1000.0;
        if secs > 0.0 {
            self.delivered() as f64 / secs
        } else {
            0.0
        }
    }
}

/// Running sums for the window in progress.
#[derive(Debug, Clone)]
pub(crate) struct WindowAccum {
    pub start: u64,
    pub ticks: u64,
    /// Population summed over ticks, per phase index.
    pub depth_sum: Vec<u64>,
    pub pool_inflow: Vec<u64>,
    pub pool_arrived: Vec<u64>,
    pub pool_dropped: Vec<u64>,
    pub latencies: Vec<Vec<u64>>,
    pub blocked: Vec<u64>,
    pub completed: Vec<u64>,
    pub residence_sum: Vec<u64>,
}

impl WindowAccum {
    pub fn new(graph: &PhaseGraph, start: u64) -> Self {
        let np = graph.pool_count();
        let ns = graph.processing_count();
        WindowAccum {
            start,
            ticks: 0,
            depth_sum: vec![0; graph.phase_count()],
            pool_inflow: vec![0; np],
            pool_arrived: vec![0; np],
            pool_dropped: vec![0; np],
            latencies: vec![Vec::new(); np],
            blocked: vec![0; ns],
            completed: vec![0; ns],
            residence_sum: vec![0; ns],
        }
    }

    pub fn finish(&mut self, graph: &PhaseGraph, end: u64, alloc: &Allocation) -> WindowMetrics {
        let ticks = self.ticks.max(1) as f64;
        let mean = |sum: u64| {
            if self.ticks == 0 {
                0.0
            } else {
                sum as f64 / ticks
            }
        };
        let pools = graph
            .graph()
            .pools
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let lat = &mut self.latencies[i];
                lat.sort_unstable();
                PoolWindow {
                    id: p.id.clone(),
                    role: p.role,
                    delivered: self.pool_inflow[i],
                    arrived: self.pool_arrived[i],
                    dropped: self.pool_dropped[i],
                    mean_depth: mean(self.depth_sum[i]),
                    latency_p50: percentile(lat, 0.50),
                    latency_p95: percentile(lat, 0.95),
                }
            })
            .collect();
        let mut phases = Vec::with_capacity(graph.processing_count());
        let mut queues = Vec::with_capacity(2 * graph.edge_count());
        for (e, edge) in graph.graph().edges.iter().enumerate() {
            for stage in Stage::ALL {
                let s = slot(e, stage);
                let done = self.completed[s];
                phases.push(PhaseWindow {
                    phase: format!("{}.{}", edge.id, stage.letter()),
                    threads: if alloc.is_empty() {
                        0
                    } else {
                        alloc.get(e, stage)
                    },
                    mean_occupancy: mean(self.depth_sum[graph.stage_phase(e, stage)]),
                    blocked_thread_ticks: self.blocked[s],
                    completed: done,
                    mean_residence_ticks: (done > 0)
                        .then(|| self.residence_sum[s] as f64 / done as f64),
                });
            }
            queues.push(QueueWindow {
                queue: format!("{}.QET", edge.id),
                mean_depth: mean(self.depth_sum[graph.queue_et_phase(e)]),
            });
            queues.push(QueueWindow {
                queue: format!("{}.QTL", edge.id),
                mean_depth: mean(self.depth_sum[graph.queue_tl_phase(e)]),
            });
        }
        let out = WindowMetrics {
            window_start: self.start,
            window_end: end,
            pools,
            phases,
            queues,
        };
        *self = WindowAccum::new(graph, end);
        out
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}
