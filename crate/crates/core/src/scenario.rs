//! Scenario files, metrics output and calibration data.
//!
//! A scenario is a JSON document describing a chain, its arrival processes,
//! the initial thread allocation and an optional open-loop schedule. See
//! `docs/scenario-format.md` for the field-by-field schema.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::ThroughputObservation;
use crate::engine::{
    Allocation, AllocationError, ArrivalProcess, EngineError, Schedule, Simulation, WindowMetrics,
};
use crate::topology::{ChainGraph, EdgeSpec, PhaseGraph, PoolRole, PoolSpec, Routing, Stage};

pub const SCHEMA_VERSION: u32 = 1;

/// A complete scenario as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub tick_ms: f64,
    pub seed: u64,
    pub pools: Vec<PoolSpec>,
    pub edges: Vec<EdgeSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub routing: Routing,
    #[serde(default)]
    pub arrivals: BTreeMap<String, ArrivalProcess>,
    /// Thread count for every `<edge>.<E|T|L>` key.
    pub allocation: BTreeMap<String, i64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<ScheduleEntry>,
}

/// From `from_tick` on, the named phases take the given thread counts;
/// other phases keep their previous values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub from_tick: u64,
    pub allocation: BTreeMap<String, i64>,
}

/// A positioned problem in a scenario document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ScenarioIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{issue} (line {line}, column {column})")]
    Parse {
        issue: ScenarioIssue,
        line: usize,
        column: usize,
    },
    #[error("{}", join(.0))]
    Invalid(Vec<ScenarioIssue>),
}

impl ScenarioError {
    pub fn issues(&self) -> Vec<&ScenarioIssue> {
        match self {
            ScenarioError::Parse { issue, .. } => vec![issue],
            ScenarioError::Invalid(v) => v.iter().collect(),
        }
    }
}

fn join(issues: &[ScenarioIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parses and fully validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioFile, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ScenarioFile = match serde_path_to_error::deserialize(de) {
        Ok(f) => f,
        Err(err) => {
            let path = err.path().to_string();
            let inner = err.into_inner();
            let message = strip_position(&inner.to_string());
            return Err(ScenarioError::Parse {
                issue: ScenarioIssue {
                    path: if path == "." { String::new() } else { path },
                    message,
                },
                line: inner.line(),
                column: inner.column(),
            });
        }
    };
    let issues = file.validate();
    if issues.is_empty() {
        Ok(file)
    } else {
        Err(ScenarioError::Invalid(issues))
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

impl ScenarioFile {
    pub fn chain(&self) -> ChainGraph {
        ChainGraph {
            pools: self.pools.clone(),
            edges: self.edges.clone(),
            routing: self.routing.clone(),
        }
    }

    /// Every problem found, in document order. Empty iff the scenario can
    /// be compiled.
    pub fn validate(&self) -> Vec<ScenarioIssue> {
        let mut out = Vec::new();
        let mut push = |path: String, message: String| out.push(ScenarioIssue { path, message });

        if self.schema_version != SCHEMA_VERSION {
            push(
                "schema_version".into(),
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            );
        }
        if !(self.tick_ms > 0.0 && self.tick_ms.is_finite()) {
            push("tick_ms".into(), "must be > 0".into());
        }
        let chain = self.chain();
        let violations = chain.validate();
        for v in &violations {
            push(v.path.clone(), v.message.clone());
        }
        for (i, edge) in self.edges.iter().enumerate() {
            for stage in Stage::ALL {
                let name = stage_field(stage);
                for (path, message) in edge.model(stage).issues() {
                    push(format!("edges[{i}].{name}.{path}"), message);
                }
            }
        }
        for (pool, process) in &self.arrivals {
            match self.pools.iter().find(|p| &p.id == pool) {
                None => push(format!("arrivals.{pool}"), format!("unknown pool {pool}")),
                Some(p) if p.role != PoolRole::Source => push(
                    format!("arrivals.{pool}"),
                    format!("pool {pool} is not a source"),
                ),
                Some(_) => {}
            }
            for (field, message) in process.issues() {
                push(format!("arrivals.{pool}.{field}"), message);
            }
        }
        if !violations.is_empty() {
            return out;
        }
        let Ok(graph) = PhaseGraph::new(chain) else {
            return out;
        };
        if let Err(e) = Allocation::from_map(&graph, &self.allocation) {
            push(allocation_path("allocation", &e), allocation_message(&e));
        }
        let mut previous = None;
        for (i, entry) in self.schedule.iter().enumerate() {
            if previous.is_some_and(|p| entry.from_tick <= p) {
                push(
                    format!("schedule[{i}].from_tick"),
                    "must be greater than the previous entry's".into(),
                );
            }
            previous = Some(entry.from_tick);
            let mut scratch = Allocation::zeros(&graph);
            if let Err(e) = scratch.patch(&graph, &entry.allocation) {
                push(
                    allocation_path(&format!("schedule[{i}].allocation"), &e),
                    allocation_message(&e),
                );
            }
        }
        out
    }

    /// Builds the phase graph, initial allocation and schedule.
    pub fn compile(&self) -> Result<Scenario, ScenarioError> {
        let issues = self.validate();
        if !issues.is_empty() {
            return Err(ScenarioError::Invalid(issues));
        }
        let invalid = |message: String| {
            ScenarioError::Invalid(vec![ScenarioIssue {
                path: String::new(),
                message,
            }])
        };
        let graph = Arc::new(PhaseGraph::new(self.chain()).map_err(|e| invalid(e.to_string()))?);
        let initial =
            Allocation::from_map(&graph, &self.allocation).map_err(|e| invalid(e.to_string()))?;
        let mut entries = vec![(0, initial)];
        for entry in &self.schedule {
            let mut next = entries[entries.len() - 1].1.clone();
            next.patch(&graph, &entry.allocation)
                .map_err(|e| invalid(e.to_string()))?;
            if entry.from_tick == 0 {
                entries[0].1 = next;
            } else {
                entries.push((entry.from_tick, next));
            }
        }
        let schedule = Schedule::new(entries).map_err(|e| invalid(e.to_string()))?;
        Ok(Scenario {
            file: self.clone(),
            graph,
            schedule,
        })
    }

    /// Pretty-printed JSON in canonical field order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }
}

fn stage_field(stage: Stage) -> &'static str {
    match stage {
        Stage::Extract => "extract",
        Stage::Transform => "transform",
        Stage::Load => "load",
    }
}

fn allocation_path(base: &str, e: &AllocationError) -> String {
    match e {
        AllocationError::UnknownPhase(k)
        | AllocationError::Negative { key: k, .. }
        | AllocationError::TooLarge { key: k, .. } => format!("{base}.{k}"),
        AllocationError::Missing(_) | AllocationError::WrongSize { .. } => base.to_string(),
    }
}

fn allocation_message(e: &AllocationError) -> String {
    match e {
        AllocationError::UnknownPhase(k) => format!("unknown phase {k}"),
        AllocationError::Missing(k) => format!("missing thread count for {k}"),
        AllocationError::Negative { value, .. } => format!("must be >= 0, got {value}"),
        AllocationError::TooLarge { value, .. } => format!("thread count {value} too large"),
        other => other.to_string(),
    }
}

/// A validated scenario ready to simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub graph: Arc<PhaseGraph>,
    pub schedule: Schedule,
}

impl Scenario {
    pub fn initial_allocation(&self) -> &Allocation {
        self.schedule.at(0)
    }

    /// A fresh simulation at tick 0, seeded from the file unless `seed`
    /// overrides it.
    pub fn simulation(&self, seed: Option<u64>) -> Result<Simulation, EngineError> {
        Simulation::new(
            Arc::clone(&self.graph),
            self.file.tick_ms,
            &self.file.arrivals,
            seed.unwrap_or(self.file.seed),
        )
    }
}

/// Parses, validates and compiles in one go.
pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    parse_scenario(text)?.compile()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricsFormat {
    #[default]
    Jsonl,
    Csv,
}

impl FromStr for MetricsFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(MetricsFormat::Jsonl),
            "csv" => Ok(MetricsFormat::Csv),
            other => Err(format!(
                "unknown metrics format {other:?} (expected jsonl or csv)"
            )),
        }
    }
}

impl fmt::Display for MetricsFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricsFormat::Jsonl => "jsonl",
            MetricsFormat::Csv => "csv",
        })
    }
}

pub const METRICS_CSV_HEADER: [&str; 6] = [
    "window_start",
    "window_end",
    "entity_kind",
    "entity_id",
    "metric",
    "value",
];

/// Renders windows as JSON lines (one object per window) or as long-format
/// CSV (one row per window, entity and metric). Absent values are omitted
/// from the CSV.
pub fn write_metrics(metrics: &[WindowMetrics], format: MetricsFormat) -> String {
    match format {
        MetricsFormat::Jsonl => {
            let mut out = String::new();
            for w in metrics {
                out.push_str(&serde_json::to_string(w).expect("metrics serialize"));
                out.push('\n');
            }
            out
        }
        MetricsFormat::Csv => {
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record(METRICS_CSV_HEADER)
                .expect("write to memory");
            for w in metrics {
                for row in csv_rows(w) {
                    wtr.write_record(&row).expect("write to memory");
                }
            }
            String::from_utf8(wtr.into_inner().expect("flush to memory")).expect("utf-8 csv")
        }
    }
}

fn csv_rows(w: &WindowMetrics) -> Vec<[String; 6]> {
    let mut rows = Vec::new();
    let mut row = |kind: &str, id: &str, metric: &str, value: String| {
        rows.push([
            w.window_start.to_string(),
            w.window_end.to_string(),
            kind.to_string(),
            id.to_string(),
            metric.to_string(),
            value,
        ]);
    };
    for p in &w.pools {
        row("pool", &p.id, "delivered", p.delivered.to_string());
        row("pool", &p.id, "arrived", p.arrived.to_string());
        row("pool", &p.id, "dropped", p.dropped.to_string());
        row("pool", &p.id, "mean_depth", p.mean_depth.to_string());
        if let Some(v) = p.latency_p50 {
            row("pool", &p.id, "latency_p50", v.to_string());
        }
        if let Some(v) = p.latency_p95 {
            row("pool", &p.id, "latency_p95", v.to_string());
        }
    }
    for p in &w.phases {
        row("phase", &p.phase, "threads", p.threads.to_string());
        row(
            "phase",
            &p.phase,
            "mean_occupancy",
            p.mean_occupancy.to_string(),
        );
        row(
            "phase",
            &p.phase,
            "blocked_thread_ticks",
            p.blocked_thread_ticks.to_string(),
        );
        row("phase", &p.phase, "completed", p.completed.to_string());
        if let Some(v) = p.mean_residence_ticks {
            row("phase", &p.phase, "mean_residence_ticks", v.to_string());
        }
    }
    for q in &w.queues {
        row("queue", &q.queue, "mean_depth", q.mean_depth.to_string());
    }
    rows
}

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("expected header {expected:?}, found {found:?}")]
    Header { expected: String, found: String },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
}

fn read_csv<T: for<'de> Deserialize<'de>>(
    text: &str,
    header: &[&str],
) -> Result<Vec<T>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let found = rdr
        .headers()
        .map_err(|e| DataError::Row {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(DataError::Header {
            expected: header.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let row: T = rec.map_err(|e| DataError::Row {
            line: e.position().map_or(0, |p| p.line()),
            message: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            },
        })?;
        out.push(row);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ThroughputRow {
    a: f64,
    throughput: f64,
}

#[derive(Deserialize)]
struct SampleRow {
    seconds: f64,
}

/// Reads `a,throughput` rows.
pub fn read_throughput_csv(text: &str) -> Result<Vec<ThroughputObservation>, DataError> {
    Ok(read_csv::<ThroughputRow>(text, &["a", "throughput"])?
        .into_iter()
        .map(|r| ThroughputObservation::new(r.a, r.throughput))
        .collect())
}

/// Reads a single `seconds` column.
pub fn read_samples_csv(text: &str) -> Result<Vec<f64>, DataError> {
    Ok(read_csv::<SampleRow>(text, &["seconds"])?
        .into_iter()
        .map(|r| r.seconds)
        .collect())
}

pub fn write_throughput_csv(observations: &[ThroughputObservation]) -> String {
    let mut out = String::from("a,throughput\n");
    for o in observations {
        out.push_str(&format!("{},{}\n", o.a, o.t_hat));
    }
    out
}

pub fn write_samples_csv(samples: &[f64]) -> String {
    let mut out = String::from("seconds\n");
    for s in samples {
        out.push_str(&format!("{s}\n"));
    }
    out
}
