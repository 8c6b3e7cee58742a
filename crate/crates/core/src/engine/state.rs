use std::collections::VecDeque;

/// Records are numbered densely in order of arrival.
pub type RecordId = u64;

/// Where one record is and how long it still has to go there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordState {
    pub id: RecordId,
    /// Phase index in the owning [`PhaseGraph`](crate::topology::PhaseGraph).
    pub phase: usize,
    /// Remaining ticks in a processing phase; always 0 in pools and queues.
    pub remaining: u64,
    /// Edge number chosen on entry to a weighted-routing pool.
    pub assigned_route: Option<usize>,
    pub entered_source_at: u64,
    pub entered_current_phase_at: u64,
    /// Tick of the last phase transition; arrivals have none.
    pub(crate) last_move: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct PoolStore {
    /// One FIFO lane per outgoing edge under weighted routing, otherwise a
    /// single shared lane.
    pub lanes: Vec<VecDeque<RecordId>>,
    pub len: usize,
}

impl PoolStore {
    pub fn new(lanes: usize) -> Self {
        PoolStore {
            lanes: vec![VecDeque::new(); lanes.max(1)],
            len: 0,
        }
    }
}

/// Cumulative counters since the last reset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    /// Records offered to each pool by its arrival process, including drops.
    pub pool_arrived: Vec<u64>,
    pub pool_dropped: Vec<u64>,
    /// Records loaded into each pool by an incoming edge.
    pub pool_inflow: Vec<u64>,
    /// Completions per processing slot (edge-major E, T, L).
    pub completed: Vec<u64>,
    pub blocked_thread_ticks: Vec<u64>,
}

impl Counters {
    pub(crate) fn new(pools: usize, slots: usize) -> Self {
        Counters {
            pool_arrived: vec![0; pools],
            pool_dropped: vec![0; pools],
            pool_inflow: vec![0; pools],
            completed: vec![0; slots],
            blocked_thread_ticks: vec![0; slots],
        }
    }

    pub fn total_arrived(&self) -> u64 {
        self.pool_arrived.iter().sum()
    }

    pub fn total_dropped(&self) -> u64 {
        self.pool_dropped.iter().sum()
    }
}

/// The full simulation state: every record's phase and remaining time,
/// the per-phase resident lists, and counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimState {
    pub(crate) tick: u64,
    pub(crate) records: Vec<RecordState>,
    pub(crate) pools: Vec<PoolStore>,
    /// Edge `e` owns queues `2e` (E to T) and `2e + 1` (T to L).
    pub(crate) queues: Vec<VecDeque<RecordId>>,
    /// Residents per processing slot, in admission order.
    pub(crate) processing: Vec<Vec<RecordId>>,
    pub(crate) counters: Counters,
}

enum Place {
    Pool(usize),
    Queue(usize),
    Slot(usize),
}

impl SimState {
    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn records(&self) -> &[RecordState] {
        &self.records
    }

    pub fn record(&self, id: RecordId) -> Option<&RecordState> {
        self.records.get(id as usize)
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    /// Records currently in processing slot `slot`.
    pub fn occupancy(&self, slot: usize) -> usize {
        self.processing[slot].len()
    }

    pub fn pool_depth(&self, pool: usize) -> usize {
        self.pools[pool].len
    }

    fn place(&self, phase: usize) -> Place {
        let np = self.pools.len();
        if phase < np {
            return Place::Pool(phase);
        }
        let rel = phase - np;
        let (e, k) = (rel / 5, rel % 5);
        match k {
            0 => Place::Slot(3 * e),
            1 => Place::Queue(2 * e),
            2 => Place::Slot(3 * e + 1),
            3 => Place::Queue(2 * e + 1),
            _ => Place::Slot(3 * e + 2),
        }
    }

    /// Number of records in phase `phase` (any kind).
    pub fn population(&self, phase: usize) -> usize {
        match self.place(phase) {
            Place::Pool(p) => self.pools[p].len,
            Place::Queue(q) => self.queues[q].len(),
            Place::Slot(s) => self.processing[s].len(),
        }
    }

    /// Ids resident in phase `phase`, in FIFO/admission order.
    pub fn residents(&self, phase: usize) -> Vec<RecordId> {
        match self.place(phase) {
            Place::Pool(p) => self.pools[p].lanes.iter().flatten().copied().collect(),
            Place::Queue(q) => self.queues[q].iter().copied().collect(),
            Place::Slot(s) => self.processing[s].clone(),
        }
    }

    pub fn phase_count(&self) -> usize {
        self.pools.len() + 5 * self.queues.len() / 2
    }

    pub fn total_population(&self) -> usize {
        (0..self.phase_count()).map(|p| self.population(p)).sum()
    }
}
