//! Pools, ETL edges and the expanded phase graph of a process chain.
//!
//! A chain is a DAG whose nodes are data pools and whose edges are ETL
//! pipelines. For simulation every location a record can occupy becomes a
//! *phase*: one per pool, plus five per edge (`E`, `QET`, `T`, `QTL`, `L`).
//! Phase indices are dense and deterministic: pools in declaration order,
//! then each edge in declaration order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::stochastic::ProcTimeModel;

/// Default capacity of the pipeline-internal E→T and T→L queues.
pub const DEFAULT_QUEUE_CAPACITY: u64 = 16;

/// Record capacity of a pool or queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Capacity {
    Bounded(u64),
    #[default]
    Unbounded,
}

impl Capacity {
    /// Whether one more record fits when `current` are already resident.
    #[inline]
    pub fn has_room(self, current: usize) -> bool {
        match self {
            Capacity::Bounded(n) => (current as u64) < n,
            Capacity::Unbounded => true,
        }
    }

    pub fn is_zero(self) -> bool {
        self == Capacity::Bounded(0)
    }
}

impl Serialize for Capacity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Capacity::Bounded(n) => s.serialize_u64(*n),
            Capacity::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Capacity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = Capacity;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative integer or \"unbounded\"")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<Capacity, E> {
                Ok(Capacity::Bounded(v))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<Capacity, E> {
                u64::try_from(v)
                    .map(Capacity::Bounded)
                    .map_err(|_| E::custom("capacity must be >= 0"))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Capacity, E> {
                if v == "unbounded" {
                    Ok(Capacity::Unbounded)
                } else {
                    Err(E::invalid_value(serde::de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(Visitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRole {
    Source,
    Intermediate,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub id: String,
    pub role: PoolRole,
    #[serde(default)]
    pub capacity: Capacity,
}

impl PoolSpec {
    pub fn new(id: impl Into<String>, role: PoolRole) -> Self {
        PoolSpec {
            id: id.into(),
            role,
            capacity: Capacity::Unbounded,
        }
    }

    pub fn with_capacity(mut self, capacity: Capacity) -> Self {
        self.capacity = capacity;
        self
    }
}

fn default_queue_capacity() -> Capacity {
    Capacity::Bounded(DEFAULT_QUEUE_CAPACITY)
}

/// One ETL pipeline moving records from pool `from` to pool `to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    pub extract: ProcTimeModel,
    pub transform: ProcTimeModel,
    pub load: ProcTimeModel,
    #[serde(default = "default_queue_capacity")]
    pub queue_et_capacity: Capacity,
    #[serde(default = "default_queue_capacity")]
    pub queue_tl_capacity: Capacity,
}

impl EdgeSpec {
    pub fn new(
        id: impl Into<String>,
        from: impl Into<String>,
        to: impl Into<String>,
        extract: ProcTimeModel,
        transform: ProcTimeModel,
        load: ProcTimeModel,
    ) -> Self {
        EdgeSpec {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            extract,
            transform,
            load,
            queue_et_capacity: default_queue_capacity(),
            queue_tl_capacity: default_queue_capacity(),
        }
    }

    pub fn with_queues(mut self, et: Capacity, tl: Capacity) -> Self {
        self.queue_et_capacity = et;
        self.queue_tl_capacity = tl;
        self
    }

    pub fn model(&self, stage: Stage) -> &ProcTimeModel {
        match stage {
            Stage::Extract => &self.extract,
            Stage::Transform => &self.transform,
            Stage::Load => &self.load,
        }
    }
}

/// The three processing stages of an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Extract,
    Transform,
    Load,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Extract, Stage::Transform, Stage::Load];

    pub fn letter(self) -> &'static str {
        match self {
            Stage::Extract => "E",
            Stage::Transform => "T",
            Stage::Load => "L",
        }
    }

    fn offset(self) -> usize {
        match self {
            Stage::Extract => 0,
            Stage::Transform => 2,
            Stage::Load => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhaseKind {
    Pool,
    Extract,
    QueueET,
    Transform,
    QueueTL,
    Load,
}

impl PhaseKind {
    const EDGE_ORDER: [PhaseKind; 5] = [
        PhaseKind::Extract,
        PhaseKind::QueueET,
        PhaseKind::Transform,
        PhaseKind::QueueTL,
        PhaseKind::Load,
    ];

    pub fn is_processing(self) -> bool {
        matches!(
            self,
            PhaseKind::Extract | PhaseKind::Transform | PhaseKind::Load
        )
    }

    pub fn is_queue(self) -> bool {
        matches!(self, PhaseKind::QueueET | PhaseKind::QueueTL)
    }

    pub fn stage(self) -> Option<Stage> {
        match self {
            PhaseKind::Extract => Some(Stage::Extract),
            PhaseKind::Transform => Some(Stage::Transform),
            PhaseKind::Load => Some(Stage::Load),
            _ => None,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            PhaseKind::Pool => "",
            PhaseKind::Extract => "E",
            PhaseKind::QueueET => "QET",
            PhaseKind::Transform => "T",
            PhaseKind::QueueTL => "QTL",
            PhaseKind::Load => "L",
        }
    }
}

/// A location a record can occupy. `owner` is a pool id for
/// [`PhaseKind::Pool`] and an edge id for every other kind.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhaseId {
    pub kind: PhaseKind,
    pub owner: String,
}

impl PhaseId {
    pub fn pool(id: impl Into<String>) -> Self {
        PhaseId {
            kind: PhaseKind::Pool,
            owner: id.into(),
        }
    }

    pub fn edge(kind: PhaseKind, edge: impl Into<String>) -> Self {
        debug_assert!(kind != PhaseKind::Pool);
        PhaseId {
            kind,
            owner: edge.into(),
        }
    }

    /// The string key used by allocations, metrics and the control protocol.
    /// Pools are keyed by their bare id, edge phases as `<edge>.<suffix>`.
    pub fn key(&self) -> String {
        self.to_string()
    }

    /// Parses an edge-phase key such as `e1.T` or `e1.QTL`.
    pub fn parse_edge_key(key: &str) -> Option<PhaseId> {
        let (edge, suffix) = key.rsplit_once('.')?;
        let kind = match suffix {
            "E" => PhaseKind::Extract,
            "QET" => PhaseKind::QueueET,
            "T" => PhaseKind::Transform,
            "QTL" => PhaseKind::QueueTL,
            "L" => PhaseKind::Load,
            _ => return None,
        };
        if edge.is_empty() {
            return None;
        }
        Some(PhaseId::edge(kind, edge))
    }
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PhaseKind::Pool => f.write_str(&self.owner),
            kind => write!(f, "{}.{}", self.owner, kind.suffix()),
        }
    }
}

/// Per-pool routing weights over outgoing edges. Pools listed here route
/// records by weighted draw on entry; all other pools let their extractors
/// race for records.
pub type Routing = BTreeMap<String, BTreeMap<String, f64>>;

/// The declared pool/edge graph of a process chain.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainGraph {
    pub pools: Vec<PoolSpec>,
    pub edges: Vec<EdgeSpec>,
    pub routing: Routing,
}

/// Which structural rule a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    InvalidId,
    DuplicatePool,
    DuplicateEdge,
    ZeroPoolCapacity,
    UnknownPool,
    SelfLoop,
    SourceHasIncoming,
    TargetHasOutgoing,
    Cycle,
    NoSource,
    NoTarget,
    Unreachable,
    DeadEnd,
    Routing,
}

/// One broken invariant. `path` locates the offending element in the
/// declaration (e.g. `edges[2]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub path: String,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid chain graph: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown phase {0}")]
    UnknownPhase(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl ChainGraph {
    pub fn new(pools: Vec<PoolSpec>, edges: Vec<EdgeSpec>) -> Self {
        ChainGraph {
            pools,
            edges,
            routing: Routing::new(),
        }
    }

    pub fn with_routing(mut self, routing: Routing) -> Self {
        self.routing = routing;
        self
    }

    /// Checks every structural invariant. The report is empty iff the graph
    /// is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |path: String, rule: Rule, message: String| {
            out.push(Violation {
                path,
                rule,
                message,
            })
        };

        let mut pool_pos: HashMap<&str, usize> = HashMap::new();
        for (i, p) in self.pools.iter().enumerate() {
            if p.id.is_empty() || p.id.contains('.') {
                push(
                    format!("pools[{i}].id"),
                    Rule::InvalidId,
                    format!("pool id {:?} must be non-empty and contain no '.'", p.id),
                );
            }
            if pool_pos.insert(p.id.as_str(), i).is_some() {
                push(
                    format!("pools[{i}].id"),
                    Rule::DuplicatePool,
                    format!("duplicate pool id {}", p.id),
                );
            }
            if p.capacity == Capacity::Bounded(0) {
                push(
                    format!("pools[{i}].capacity"),
                    Rule::ZeroPoolCapacity,
                    format!("pool {} must have positive capacity", p.id),
                );
            }
        }

        let mut edge_ids = HashSet::new();
        // adjacency over pool positions, only for edges whose ends resolve
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); self.pools.len()];
        let mut radj: Vec<Vec<usize>> = vec![Vec::new(); self.pools.len()];
        for (i, e) in self.edges.iter().enumerate() {
            if e.id.is_empty() || e.id.contains('.') {
                push(
                    format!("edges[{i}].id"),
                    Rule::InvalidId,
                    format!("edge id {:?} must be non-empty and contain no '.'", e.id),
                );
            }
            if !edge_ids.insert(e.id.as_str()) {
                push(
                    format!("edges[{i}].id"),
                    Rule::DuplicateEdge,
                    format!("duplicate edge id {}", e.id),
                );
            }
            let from = pool_pos.get(e.from.as_str()).copied();
            let to = pool_pos.get(e.to.as_str()).copied();
            if from.is_none() {
                push(
                    format!("edges[{i}].from"),
                    Rule::UnknownPool,
                    format!("unknown pool {}", e.from),
                );
            }
            if to.is_none() {
                push(
                    format!("edges[{i}].to"),
                    Rule::UnknownPool,
                    format!("unknown pool {}", e.to),
                );
            }
            if e.from == e.to {
                push(
                    format!("edges[{i}]"),
                    Rule::SelfLoop,
                    format!("self-loop on {}", e.from),
                );
            }
            if let (Some(f), Some(t)) = (from, to) {
                if self.pools[t].role == PoolRole::Source {
                    push(
                        format!("edges[{i}].to"),
                        Rule::SourceHasIncoming,
                        format!("source pool {} has incoming edge {}", e.to, e.id),
                    );
                }
                if self.pools[f].role == PoolRole::Target {
                    push(
                        format!("edges[{i}].from"),
                        Rule::TargetHasOutgoing,
                        format!("target pool {} has outgoing edge {}", e.from, e.id),
                    );
                }
                if f != t {
                    adj[f].push(t);
                    radj[t].push(f);
                }
            }
        }

        if let Some(cycle) = find_cycle(&adj) {
            let names: Vec<&str> = cycle.iter().map(|&i| self.pools[i].id.as_str()).collect();
            push(
                String::new(),
                Rule::Cycle,
                format!("cycle: {}", names.join(",")),
            );
        }

        let sources: Vec<usize> = (0..self.pools.len())
            .filter(|&i| self.pools[i].role == PoolRole::Source)
            .collect();
        let targets: Vec<usize> = (0..self.pools.len())
            .filter(|&i| self.pools[i].role == PoolRole::Target)
            .collect();
        if sources.is_empty() {
            push(String::new(), Rule::NoSource, "no source pool".into());
        }
        if targets.is_empty() {
            push(String::new(), Rule::NoTarget, "no target pool".into());
        }
        let from_source = reachable(&adj, &sources);
        let to_target = reachable(&radj, &targets);
        for (i, p) in self.pools.iter().enumerate() {
            if !sources.is_empty() && !from_source[i] {
                push(
                    format!("pools[{i}]"),
                    Rule::Unreachable,
                    format!("pool {} is not reachable from any source", p.id),
                );
            }
            if !targets.is_empty() && !to_target[i] {
                push(
                    format!("pools[{i}]"),
                    Rule::DeadEnd,
                    format!("pool {} cannot reach any target", p.id),
                );
            }
        }

        for (pool, weights) in &self.routing {
            let path = format!("routing.{pool}");
            let Some(&pi) = pool_pos.get(pool.as_str()) else {
                push(path, Rule::Routing, format!("unknown pool {pool}"));
                continue;
            };
            let outgoing: HashSet<&str> = self
                .edges
                .iter()
                .filter(|e| e.from == self.pools[pi].id)
                .map(|e| e.id.as_str())
                .collect();
            for (edge, w) in weights {
                if !outgoing.contains(edge.as_str()) {
                    push(
                        format!("{path}.{edge}"),
                        Rule::Routing,
                        format!("{edge} is not an outgoing edge of pool {pool}"),
                    );
                } else if !(w.is_finite() && *w >= 0.0) {
                    push(
                        format!("{path}.{edge}"),
                        Rule::Routing,
                        "weight must be finite and >= 0".into(),
                    );
                }
            }
            for edge in &outgoing {
                if !weights.contains_key(*edge) {
                    push(
                        path.clone(),
                        Rule::Routing,
                        format!("missing weight for outgoing edge {edge}"),
                    );
                }
            }
            let total: f64 = weights.values().filter(|w| w.is_finite()).sum();
            if total.is_nan() || total <= 0.0 {
                push(
                    path,
                    Rule::Routing,
                    "weights must sum to a positive value".into(),
                );
            }
        }
        out
    }
}

/// Returns the pools of one directed cycle (in traversal order) if any.
fn find_cycle(adj: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let n = adj.len();
    let mut mark = vec![Mark::White; n];
    let mut stack: Vec<usize> = Vec::new();
    for root in 0..n {
        if mark[root] != Mark::White {
            continue;
        }
        // iterative DFS: (node, next child cursor)
        let mut frames: Vec<(usize, usize)> = vec![(root, 0)];
        mark[root] = Mark::Grey;
        stack.push(root);
        while let Some(&mut (node, ref mut cursor)) = frames.last_mut() {
            if let Some(&next) = adj[node].get(*cursor) {
                *cursor += 1;
                match mark[next] {
                    Mark::White => {
                        mark[next] = Mark::Grey;
                        stack.push(next);
                        frames.push((next, 0));
                    }
                    Mark::Grey => {
                        let start = stack.iter().position(|&x| x == next).unwrap();
                        return Some(stack[start..].to_vec());
                    }
                    Mark::Black => {}
                }
            } else {
                mark[node] = Mark::Black;
                stack.pop();
                frames.pop();
            }
        }
    }
    None
}

fn reachable(adj: &[Vec<usize>], roots: &[usize]) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut todo: Vec<usize> = roots.to_vec();
    for &r in roots {
        seen[r] = true;
    }
    while let Some(n) = todo.pop() {
        for &m in &adj[n] {
            if !seen[m] {
                seen[m] = true;
                todo.push(m);
            }
        }
    }
    seen
}

/// A validated chain graph with its dense phase index.
///
/// Layout: phase `i < pools.len()` is pool `i`; edge `e` owns phases
/// `pools.len() + 5e + {0: E, 1: QET, 2: T, 3: QTL, 4: L}`.
#[derive(Debug, Clone)]
pub struct PhaseGraph {
    graph: ChainGraph,
    phases: Vec<PhaseId>,
    index: HashMap<PhaseId, usize>,
    successors: Vec<Vec<usize>>,
    pool_index: HashMap<String, usize>,
    edge_index: HashMap<String, usize>,
    edge_from: Vec<usize>,
    edge_to: Vec<usize>,
    out_edges: Vec<Vec<usize>>,
}

/// Validates `graph` and builds its phase layout.
pub fn expand_phases(graph: &ChainGraph) -> Result<PhaseGraph, TopologyError> {
    PhaseGraph::new(graph.clone())
}

impl PhaseGraph {
    pub fn new(graph: ChainGraph) -> Result<Self, TopologyError> {
        let violations = graph.validate();
        if !violations.is_empty() {
            return Err(TopologyError::Invalid(violations));
        }
        let np = graph.pools.len();
        let mut phases = Vec::with_capacity(np + 5 * graph.edges.len());
        for p in &graph.pools {
            phases.push(PhaseId::pool(&p.id));
        }
        for e in &graph.edges {
            for kind in PhaseKind::EDGE_ORDER {
                phases.push(PhaseId::edge(kind, &e.id));
            }
        }
        let index = phases
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        let pool_index: HashMap<String, usize> = graph
            .pools
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), i))
            .collect();
        let edge_index = graph
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        let edge_from: Vec<usize> = graph.edges.iter().map(|e| pool_index[&e.from]).collect();
        let edge_to: Vec<usize> = graph.edges.iter().map(|e| pool_index[&e.to]).collect();
        let mut out_edges = vec![Vec::new(); np];
        for (ei, &f) in edge_from.iter().enumerate() {
            out_edges[f].push(ei);
        }

        let mut successors = vec![Vec::new(); phases.len()];
        for (pi, outs) in out_edges.iter().enumerate() {
            successors[pi] = outs.iter().map(|&e| np + 5 * e).collect();
        }
        for (e, &to) in edge_to.iter().enumerate() {
            let base = np + 5 * e;
            for k in 0..4 {
                successors[base + k] = vec![base + k + 1];
            }
            successors[base + 4] = vec![to];
        }

        Ok(PhaseGraph {
            graph,
            phases,
            index,
            successors,
            pool_index,
            edge_index,
            edge_from,
            edge_to,
            out_edges,
        })
    }

    pub fn graph(&self) -> &ChainGraph {
        &self.graph
    }

    pub fn phases(&self) -> &[PhaseId] {
        &self.phases
    }

    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    pub fn pool_count(&self) -> usize {
        self.graph.pools.len()
    }

    pub fn edge_count(&self) -> usize {
        self.graph.edges.len()
    }

    pub fn index_of(&self, phase: &PhaseId) -> Option<usize> {
        self.index.get(phase).copied()
    }

    pub fn phase(&self, index: usize) -> &PhaseId {
        &self.phases[index]
    }

    pub fn pool_position(&self, id: &str) -> Option<usize> {
        self.pool_index.get(id).copied()
    }

    pub fn edge_position(&self, id: &str) -> Option<usize> {
        self.edge_index.get(id).copied()
    }

    /// Phase index of `stage` on edge number `edge`.
    #[inline]
    pub fn stage_phase(&self, edge: usize, stage: Stage) -> usize {
        self.pool_count() + 5 * edge + stage.offset()
    }

    #[inline]
    pub fn queue_et_phase(&self, edge: usize) -> usize {
        self.pool_count() + 5 * edge + 1
    }

    #[inline]
    pub fn queue_tl_phase(&self, edge: usize) -> usize {
        self.pool_count() + 5 * edge + 3
    }

    pub fn edge_source(&self, edge: usize) -> usize {
        self.edge_from[edge]
    }

    pub fn edge_target(&self, edge: usize) -> usize {
        self.edge_to[edge]
    }

    /// Outgoing edge numbers of pool number `pool`, in declaration order.
    pub fn out_edges(&self, pool: usize) -> &[usize] {
        &self.out_edges[pool]
    }

    /// Next phases a record may enter from phase number `index`.
    pub fn successors_of(&self, index: usize) -> &[usize] {
        &self.successors[index]
    }

    /// The next phase(s) a record in `phase` may enter. Whether a move is
    /// admissible right now (threads, capacity) is the engine's concern.
    pub fn successors(&self, phase: &PhaseId) -> Result<Vec<PhaseId>, TopologyError> {
        let i = self
            .index_of(phase)
            .ok_or_else(|| TopologyError::UnknownPhase(phase.to_string()))?;
        Ok(self.successors[i]
            .iter()
            .map(|&j| self.phases[j].clone())
            .collect())
    }

    /// Processing phases (E, T, L of every edge) in canonical order.
    pub fn processing_phases(&self) -> impl Iterator<Item = (usize, Stage)> + '_ {
        (0..self.edge_count()).flat_map(|e| Stage::ALL.into_iter().map(move |s| (e, s)))
    }

    pub fn processing_count(&self) -> usize {
        3 * self.edge_count()
    }
}
