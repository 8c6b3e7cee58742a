//! Fixed-increment simulation of a chain as a controlled Markov process.
//!
//! Each call to [`Simulation::step`] advances one tick under a given
//! [`Allocation`]:
//!
//! 1. arrivals are injected into source pools (capacity-clipped);
//! 2. every record in an E/T/L phase with time left is decremented;
//! 3. records move in four global stages, visiting edges in a fresh random
//!    permutation each tick:
//!    a. finished loads enter their target pool,
//!    b. finished transforms enter the T→L queue (or go straight to a free
//!    L thread when that queue has capacity 0),
//!    c. queue heads are promoted to free L and T threads,
//!    d. finished extracts enter the E→T queue, then free E threads claim
//!    records from the source pool;
//! 4. the tick counter advances and window sums accumulate.
//!
//! A record that finished but cannot move keeps its thread and counts one
//! blocked thread-tick. A record moves at most one phase per tick, so a
//! record that entered a pool or queue this tick waits for the next one.
//! Processing time is drawn on admission using the admitting phase's thread
//! count; later allocation changes never preempt records in flight.

mod allocation;
mod arrivals;
mod metrics;
mod state;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

pub use allocation::{Allocation, AllocationError, Schedule, ScheduleError};
pub use arrivals::ArrivalProcess;
pub use metrics::{PhaseWindow, PoolWindow, QueueWindow, WindowMetrics};
pub use state::{Counters, RecordId, RecordState, SimState};

use allocation::slot;
use metrics::WindowAccum;
use state::PoolStore;

use crate::stochastic::{sample_ticks, ProcTimeModel, Purpose, RngStream, SampleError, StreamId};
use crate::topology::{PhaseGraph, PoolRole, Stage, TopologyError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("arrivals configured for unknown pool {0}")]
    UnknownPool(String),
    #[error("arrivals configured for non-source pool {0}")]
    NotSource(String),
    #[error("arrivals for {pool}: {field} {message}")]
    BadArrival {
        pool: String,
        field: String,
        message: String,
    },
    #[error("edge {edge} {stage} model: {path} {message}")]
    BadModel {
        edge: String,
        stage: &'static str,
        path: String,
        message: String,
    },
    #[error("tick length must be > 0 ms, got {0}")]
    BadTick(f64),
    #[error("window must be >= 1 tick")]
    BadWindow,
}

struct Streams {
    processing: Vec<RngStream>,
    arrivals: Vec<RngStream>,
    routing: Vec<RngStream>,
    order: RngStream,
}

impl Streams {
    fn new(graph: &PhaseGraph, seed: u64) -> Self {
        let processing = graph
            .processing_phases()
            .map(|(e, s)| {
                RngStream::new(
                    seed,
                    StreamId::new(graph.stage_phase(e, s), Purpose::ProcessingTime),
                )
            })
            .collect();
        let per_pool = |purpose| {
            (0..graph.pool_count())
                .map(|p| RngStream::new(seed, StreamId::new(p, purpose)))
                .collect()
        };
        Streams {
            processing,
            arrivals: per_pool(Purpose::Arrivals),
            routing: per_pool(Purpose::Routing),
            order: RngStream::new(seed, StreamId::new(0, Purpose::EdgeOrder)),
        }
    }
}

/// One simulation instance: graph, models, RNG streams and state.
pub struct Simulation {
    graph: Arc<PhaseGraph>,
    models: Vec<ProcTimeModel>,
    tick_ms: f64,
    seed: u64,
    arrivals: Vec<Option<ArrivalProcess>>,
    /// Per pool: routing weights aligned with `graph.out_edges(pool)`.
    weights: Vec<Option<Vec<f64>>>,
    state: SimState,
    streams: Streams,
    window: WindowAccum,
    last_allocation: Allocation,
    order: Vec<usize>,
}

impl Simulation {
    /// Builds the tick-0 state: batch arrivals are materialized in their
    /// source pools (drops counted), counters are zero and all random
    /// streams are derived from `seed`.
    pub fn new(
        graph: Arc<PhaseGraph>,
        tick_ms: f64,
        arrivals: &BTreeMap<String, ArrivalProcess>,
        seed: u64,
    ) -> Result<Self, EngineError> {
        if !(tick_ms > 0.0 && tick_ms.is_finite()) {
            return Err(EngineError::BadTick(tick_ms));
        }
        let mut per_pool = vec![None; graph.pool_count()];
        for (pool, process) in arrivals {
            let p = graph
                .pool_position(pool)
                .ok_or_else(|| EngineError::UnknownPool(pool.clone()))?;
            if graph.graph().pools[p].role != PoolRole::Source {
                return Err(EngineError::NotSource(pool.clone()));
            }
            if let Some((field, message)) = process.issues().into_iter().next() {
                return Err(EngineError::BadArrival {
                    pool: pool.clone(),
                    field,
                    message,
                });
            }
            per_pool[p] = Some(*process);
        }
        let mut models = Vec::with_capacity(graph.processing_count());
        for (e, stage) in graph.processing_phases() {
            let edge = &graph.graph().edges[e];
            let m = *edge.model(stage);
            if let Some((path, message)) = m.issues().into_iter().next() {
                return Err(EngineError::BadModel {
                    edge: edge.id.clone(),
                    stage: stage.letter(),
                    path,
                    message,
                });
            }
            models.push(m);
        }
        let weights = (0..graph.pool_count())
            .map(|p| {
                let id = &graph.graph().pools[p].id;
                graph.graph().routing.get(id).map(|w| {
                    graph
                        .out_edges(p)
                        .iter()
                        .map(|&e| w[&graph.graph().edges[e].id])
                        .collect()
                })
            })
            .collect();
        let mut sim = Simulation {
            state: empty_state(&graph),
            streams: Streams::new(&graph, seed),
            window: WindowAccum::new(&graph, 0),
            last_allocation: Allocation::zeros(&graph),
            order: (0..graph.edge_count()).collect(),
            graph,
            models,
            tick_ms,
            seed,
            arrivals: per_pool,
            weights,
        };
        sim.materialize_batches();
        Ok(sim)
    }

    /// Reinitializes to tick 0 with a new seed.
    pub fn reset(&mut self, seed: u64) {
        self.seed = seed;
        self.state = empty_state(&self.graph);
        self.streams = Streams::new(&self.graph, seed);
        self.window = WindowAccum::new(&self.graph, 0);
        self.order = (0..self.graph.edge_count()).collect();
        self.materialize_batches();
    }

    fn materialize_batches(&mut self) {
        for p in 0..self.graph.pool_count() {
            if let Some(a) = self.arrivals[p] {
                self.inject(p, a.initial());
            }
        }
    }

    pub fn graph(&self) -> &Arc<PhaseGraph> {
        &self.graph
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn tick(&self) -> u64 {
        self.state.tick
    }

    pub fn tick_ms(&self) -> f64 {
        self.tick_ms
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The allocation used by the most recent step.
    pub fn last_allocation(&self) -> &Allocation {
        &self.last_allocation
    }

    /// First tick of the window currently accumulating.
    pub fn window_start(&self) -> u64 {
        self.window.start
    }

    /// Advances one tick under `action`.
    pub fn step(&mut self, action: &Allocation) -> Result<(), EngineError> {
        action.check_shape(&self.graph)?;
        if self.last_allocation != *action {
            self.last_allocation = action.clone();
        }
        let t = self.state.tick;

        for p in 0..self.graph.pool_count() {
            if let Some(a) = self.arrivals[p] {
                let n = a.count_at(t, &mut self.streams.arrivals[p]);
                self.inject(p, n);
            }
        }

        for slot in &self.state.processing {
            for &rid in slot {
                let r = &mut self.state.records[rid as usize];
                r.remaining = r.remaining.saturating_sub(1);
            }
        }

        let mut order = std::mem::take(&mut self.order);
        order.shuffle(&mut self.streams.order);
        for &e in &order {
            self.complete(e, Stage::Load, action)?;
        }
        for &e in &order {
            self.complete(e, Stage::Transform, action)?;
        }
        for &e in &order {
            self.promote(e, action)?;
        }
        for &e in &order {
            self.complete(e, Stage::Extract, action)?;
            self.admit_from_pool(e, action)?;
        }
        self.order = order;

        self.window.ticks += 1;
        for phase in 0..self.graph.phase_count() {
            self.window.depth_sum[phase] += self.state.population(phase) as u64;
        }
        self.state.tick += 1;
        Ok(())
    }

    /// Runs `n_ticks` under `schedule`, emitting one [`WindowMetrics`] each
    /// time `window` ticks have accumulated.
    pub fn run(
        &mut self,
        schedule: &Schedule,
        n_ticks: u64,
        window: u64,
    ) -> Result<Vec<WindowMetrics>, EngineError> {
        if window == 0 {
            return Err(EngineError::BadWindow);
        }
        let mut out = Vec::new();
        for _ in 0..n_ticks {
            let action = schedule.at(self.state.tick);
            self.step(action)?;
            if self.state.tick - self.window.start >= window {
                out.push(self.take_window_metrics());
            }
        }
        Ok(out)
    }

    /// Closes the current window at the present tick and starts a new one.
    pub fn take_window_metrics(&mut self) -> WindowMetrics {
        self.window
            .finish(&self.graph, self.state.tick, &self.last_allocation)
    }

    fn inject(&mut self, pool: usize, n: u64) {
        let t = self.state.tick;
        let cap = self.graph.graph().pools[pool].capacity;
        for _ in 0..n {
            self.state.counters.pool_arrived[pool] += 1;
            self.window.pool_arrived[pool] += 1;
            if !cap.has_room(self.state.pools[pool].len) {
                self.state.counters.pool_dropped[pool] += 1;
                self.window.pool_dropped[pool] += 1;
                continue;
            }
            let id = self.state.records.len() as RecordId;
            self.state.records.push(RecordState {
                id,
                phase: pool,
                remaining: 0,
                assigned_route: None,
                entered_source_at: t,
                entered_current_phase_at: t,
                last_move: None,
            });
            self.place_in_pool(id, pool);
        }
    }

    /// Appends a record to a pool lane, drawing its route if the pool is
    /// weighted.
    fn place_in_pool(&mut self, rid: RecordId, pool: usize) {
        let lane = match &self.weights[pool] {
            Some(w) => {
                let total: f64 = w.iter().sum();
                let mut u = self.streams.routing[pool].random::<f64>() * total;
                let mut pick = w.len() - 1;
                for (i, wi) in w.iter().enumerate() {
                    if u < *wi {
                        pick = i;
                        break;
                    }
                    u -= wi;
                }
                // never route onto a zero-weight edge through rounding
                while w[pick] <= 0.0 {
                    pick -= 1;
                }
                self.state.records[rid as usize].assigned_route =
                    Some(self.graph.out_edges(pool)[pick]);
                pick
            }
            None => 0,
        };
        let store = &mut self.state.pools[pool];
        store.lanes[lane].push_back(rid);
        store.len += 1;
    }

    fn set_phase(&mut self, rid: RecordId, phase: usize, remaining: u64) {
        let t = self.state.tick;
        let r = &mut self.state.records[rid as usize];
        r.phase = phase;
        r.remaining = remaining;
        r.entered_current_phase_at = t;
        r.last_move = Some(t);
    }

    fn admit(
        &mut self,
        rid: RecordId,
        edge: usize,
        stage: Stage,
        action: &Allocation,
    ) -> Result<(), EngineError> {
        let s = slot(edge, stage);
        let n = sample_ticks(
            &self.models[s],
            action.slot(s),
            self.tick_ms,
            &mut self.streams.processing[s],
        )?;
        self.set_phase(rid, self.graph.stage_phase(edge, stage), n);
        self.state.processing[s].push(rid);
        Ok(())
    }

    fn has_free_thread(&self, edge: usize, stage: Stage, action: &Allocation) -> bool {
        let s = slot(edge, stage);
        (self.state.processing[s].len() as u64) < u64::from(action.slot(s))
    }

    /// Moves finished records out of `stage` on `edge`; blocked ones stay.
    fn complete(
        &mut self,
        edge: usize,
        stage: Stage,
        action: &Allocation,
    ) -> Result<(), EngineError> {
        let s = slot(edge, stage);
        if self.state.processing[s].is_empty() {
            return Ok(());
        }
        let t = self.state.tick;
        let residents = std::mem::take(&mut self.state.processing[s]);
        let mut kept = Vec::with_capacity(residents.len());
        for rid in residents {
            let (remaining, entered) = {
                let r = &self.state.records[rid as usize];
                (r.remaining, r.entered_current_phase_at)
            };
            if remaining > 0 {
                kept.push(rid);
                continue;
            }
            let moved = match stage {
                Stage::Load => self.enter_target_pool(rid, edge),
                Stage::Transform => self.hand_off(rid, edge, Stage::Transform, action)?,
                Stage::Extract => self.hand_off(rid, edge, Stage::Extract, action)?,
            };
            if moved {
                self.state.counters.completed[s] += 1;
                self.window.completed[s] += 1;
                self.window.residence_sum[s] += t - entered;
            } else {
                self.state.counters.blocked_thread_ticks[s] += 1;
                self.window.blocked[s] += 1;
                kept.push(rid);
            }
        }
        self.state.processing[s] = kept;
        Ok(())
    }

    fn enter_target_pool(&mut self, rid: RecordId, edge: usize) -> bool {
        let pool = self.graph.edge_target(edge);
        let spec = &self.graph.graph().pools[pool];
        if !spec.capacity.has_room(self.state.pools[pool].len) {
            return false;
        }
        let is_target = spec.role == PoolRole::Target;
        self.set_phase(rid, pool, 0);
        self.place_in_pool(rid, pool);
        self.state.counters.pool_inflow[pool] += 1;
        self.window.pool_inflow[pool] += 1;
        if is_target {
            let lat = self.state.tick - self.state.records[rid as usize].entered_source_at;
            self.window.latencies[pool].push(lat);
        }
        true
    }

    /// E→QET / T→QTL, or straight to the next stage's free thread when the
    /// queue has capacity 0.
    fn hand_off(
        &mut self,
        rid: RecordId,
        edge: usize,
        from: Stage,
        action: &Allocation,
    ) -> Result<bool, EngineError> {
        let spec = &self.graph.graph().edges[edge];
        let (q, cap, queue_phase, next) = match from {
            Stage::Extract => (
                2 * edge,
                spec.queue_et_capacity,
                self.graph.queue_et_phase(edge),
                Stage::Transform,
            ),
            Stage::Transform => (
                2 * edge + 1,
                spec.queue_tl_capacity,
                self.graph.queue_tl_phase(edge),
                Stage::Load,
            ),
            Stage::Load => unreachable!("loads leave into pools"),
        };
        if cap.is_zero() {
            if self.has_free_thread(edge, next, action) {
                self.admit(rid, edge, next, action)?;
                return Ok(true);
            }
            return Ok(false);
        }
        if cap.has_room(self.state.queues[q].len()) {
            self.set_phase(rid, queue_phase, 0);
            self.state.queues[q].push_back(rid);
            return Ok(true);
        }
        Ok(false)
    }

    /// Head-of-line promotion QTL→L, then QET→T.
    fn promote(&mut self, edge: usize, action: &Allocation) -> Result<(), EngineError> {
        let t = self.state.tick;
        for (q, stage) in [(2 * edge + 1, Stage::Load), (2 * edge, Stage::Transform)] {
            while self.has_free_thread(edge, stage, action) {
                let Some(&head) = self.state.queues[q].front() else {
                    break;
                };
                if self.state.records[head as usize].last_move == Some(t) {
                    break;
                }
                self.state.queues[q].pop_front();
                self.admit(head, edge, stage, action)?;
            }
        }
        Ok(())
    }

    /// Free E threads claim records from the edge's source pool, FIFO over
    /// the shared lane (race) or the edge's own lane (weighted).
    fn admit_from_pool(&mut self, edge: usize, action: &Allocation) -> Result<(), EngineError> {
        let t = self.state.tick;
        let pool = self.graph.edge_source(edge);
        let lane = if self.weights[pool].is_some() {
            self.graph
                .out_edges(pool)
                .iter()
                .position(|&e| e == edge)
                .expect("edge leaves its source pool")
        } else {
            0
        };
        while self.has_free_thread(edge, Stage::Extract, action) {
            let Some(&head) = self.state.pools[pool].lanes[lane].front() else {
                break;
            };
            if self.state.records[head as usize].last_move == Some(t) {
                break;
            }
            self.state.pools[pool].lanes[lane].pop_front();
            self.state.pools[pool].len -= 1;
            self.admit(head, edge, Stage::Extract, action)?;
        }
        Ok(())
    }
}

fn empty_state(graph: &PhaseGraph) -> SimState {
    let pools = (0..graph.pool_count())
        .map(|p| {
            let weighted = graph
                .graph()
                .routing
                .contains_key(&graph.graph().pools[p].id);
            PoolStore::new(if weighted {
                graph.out_edges(p).len()
            } else {
                1
            })
        })
        .collect();
    SimState {
        tick: 0,
        records: Vec::new(),
        pools,
        queues: vec![Default::default(); 2 * graph.edge_count()],
        processing: vec![Vec::new(); graph.processing_count()],
        counters: Counters::new(graph.pool_count(), graph.processing_count()),
    }
}
