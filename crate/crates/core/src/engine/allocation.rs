use std::collections::BTreeMap;

use thiserror::Error;

use crate::topology::{PhaseGraph, PhaseId, Stage};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AllocationError {
    #[error("unknown phase {0}")]
    UnknownPhase(String),
    #[error("allocation is missing {0}")]
    Missing(String),
    #[error("{key}: thread count must be >= 0, got {value}")]
    Negative { key: String, value: i64 },
    #[error("{key}: thread count {value} too large")]
    TooLarge { key: String, value: i64 },
    #[error("allocation has {got} entries, graph has {expected} processing phases")]
    WrongSize { expected: usize, got: usize },
}

/// Thread counts for every E, T and L phase of a chain.
///
/// Stored densely in the graph's canonical processing order
/// (edge-major, then E, T, L). Keys on the wire are `<edge>.<E|T|L>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Allocation {
    threads: Vec<u32>,
}

impl Allocation {
    pub fn zeros(graph: &PhaseGraph) -> Self {
        Allocation {
            threads: vec![0; graph.processing_count()],
        }
    }

    pub fn uniform(graph: &PhaseGraph, threads: u32) -> Self {
        Allocation {
            threads: vec![threads; graph.processing_count()],
        }
    }

    /// Builds an allocation from `(edge, stage, threads)` triples over a zero
    /// baseline.
    pub fn from_triples(
        graph: &PhaseGraph,
        triples: &[(&str, Stage, u32)],
    ) -> Result<Self, AllocationError> {
        let mut out = Allocation::zeros(graph);
        for &(edge, stage, n) in triples {
            let e = graph.edge_position(edge).ok_or_else(|| {
                AllocationError::UnknownPhase(format!("{edge}.{}", stage.letter()))
            })?;
            out.set(e, stage, n);
        }
        Ok(out)
    }

    /// A complete allocation from a string-keyed map. Every processing phase
    /// must be present.
    pub fn from_map(
        graph: &PhaseGraph,
        map: &BTreeMap<String, i64>,
    ) -> Result<Self, AllocationError> {
        let mut out = Allocation::zeros(graph);
        out.patch(graph, map)?;
        for (e, stage) in graph.processing_phases() {
            let key = slot_key(graph, e, stage);
            if !map.contains_key(&key) {
                return Err(AllocationError::Missing(key));
            }
        }
        Ok(out)
    }

    /// Overwrites only the named phases. Either every entry applies or none
    /// does.
    pub fn patch(
        &mut self,
        graph: &PhaseGraph,
        map: &BTreeMap<String, i64>,
    ) -> Result<(), AllocationError> {
        let mut updates = Vec::with_capacity(map.len());
        for (key, &value) in map {
            let slot = resolve_key(graph, key)?;
            if value < 0 {
                return Err(AllocationError::Negative {
                    key: key.clone(),
                    value,
                });
            }
            let n = u32::try_from(value).map_err(|_| AllocationError::TooLarge {
                key: key.clone(),
                value,
            })?;
            updates.push((slot, n));
        }
        for (slot, n) in updates {
            self.threads[slot] = n;
        }
        Ok(())
    }

    pub fn to_map(&self, graph: &PhaseGraph) -> BTreeMap<String, u32> {
        graph
            .processing_phases()
            .map(|(e, s)| (slot_key(graph, e, s), self.get(e, s)))
            .collect()
    }

    #[inline]
    pub fn get(&self, edge: usize, stage: Stage) -> u32 {
        self.threads[slot(edge, stage)]
    }

    pub fn set(&mut self, edge: usize, stage: Stage, threads: u32) {
        self.threads[slot(edge, stage)] = threads;
    }

    #[inline]
    pub(crate) fn slot(&self, index: usize) -> u32 {
        self.threads[index]
    }

    pub fn len(&self) -> usize {
        self.threads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.threads.is_empty()
    }

    pub fn total_threads(&self) -> u64 {
        self.threads.iter().map(|&t| u64::from(t)).sum()
    }

    pub(crate) fn check_shape(&self, graph: &PhaseGraph) -> Result<(), AllocationError> {
        if self.threads.len() != graph.processing_count() {
            return Err(AllocationError::WrongSize {
                expected: graph.processing_count(),
                got: self.threads.len(),
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn slot(edge: usize, stage: Stage) -> usize {
    3 * edge
        + match stage {
            Stage::Extract => 0,
            Stage::Transform => 1,
            Stage::Load => 2,
        }
}

pub(crate) fn slot_key(graph: &PhaseGraph, edge: usize, stage: Stage) -> String {
    format!("{}.{}", graph.graph().edges[edge].id, stage.letter())
}

fn resolve_key(graph: &PhaseGraph, key: &str) -> Result<usize, AllocationError> {
    let unknown = || AllocationError::UnknownPhase(key.to_string());
    let phase = PhaseId::parse_edge_key(key).ok_or_else(unknown)?;
    let stage = phase.kind.stage().ok_or_else(unknown)?;
    let edge = graph.edge_position(&phase.owner).ok_or_else(unknown)?;
    Ok(slot(edge, stage))
}

/// Open-loop action sequence: `(from_tick, allocation)` entries sorted by
/// tick, the first at tick 0. The latest entry at or before the current tick
/// applies.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    entries: Vec<(u64, Allocation)>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("schedule is empty")]
    Empty,
    #[error("schedule must start at tick 0")]
    NoInitialEntry,
    #[error("schedule entries must be sorted by from_tick")]
    Unsorted,
}

impl Schedule {
    pub fn new(entries: Vec<(u64, Allocation)>) -> Result<Self, ScheduleError> {
        match entries.first() {
            None => return Err(ScheduleError::Empty),
            Some((t, _)) if *t != 0 => return Err(ScheduleError::NoInitialEntry),
            _ => {}
        }
        if entries.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(ScheduleError::Unsorted);
        }
        Ok(Schedule { entries })
    }

    pub fn constant(allocation: Allocation) -> Self {
        Schedule {
            entries: vec![(0, allocation)],
        }
    }

    pub fn at(&self, tick: u64) -> &Allocation {
        let i = self.entries.partition_point(|(from, _)| *from <= tick);
        &self.entries[i.saturating_sub(1)].1
    }

    pub fn entries(&self) -> &[(u64, Allocation)] {
        &self.entries
    }
}
