//! Line-delimited JSON control protocol for a running simulation.
//!
//! Clients send one [`ControlMessage`] per line and receive [`Event`]s, one
//! per line. [`ControlCore`] is the protocol state machine: it owns the
//! simulation and applies commands strictly between ticks. [`server`] wraps
//! it in threads and transports.
//!
//! Every command line a core accepts is recorded with the tick at which it
//! was applied, and [`replay`] re-executes such a transcript without any
//! wall-clock pacing.

pub mod server;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Allocation, EngineError, Simulation, WindowMetrics};
use crate::scenario::Scenario;
use crate::topology::{PhaseKind, Stage};

pub const DEFAULT_TICKS_PER_SECOND: u64 = 1000;

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlMessage {
    /// Partial update: only the named phases change.
    SetAllocation {
        alloc: BTreeMap<String, i64>,
    },
    Run {
        ticks: u64,
    },
    Pause {},
    Reset {
        seed: u64,
    },
    Snapshot {},
    SetPace {
        ticks_per_second: u64,
    },
}

impl ControlMessage {
    pub fn name(&self) -> &'static str {
        match self {
            ControlMessage::SetAllocation { .. } => "set_allocation",
            ControlMessage::Run { .. } => "run",
            ControlMessage::Pause {} => "pause",
            ControlMessage::Reset { .. } => "reset",
            ControlMessage::Snapshot {} => "snapshot",
            ControlMessage::SetPace { .. } => "set_pace",
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("control message serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSummary {
    pub id: String,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub tick: u64,
    pub running: bool,
    pub remaining_ticks: u64,
    pub ticks_per_second: u64,
    pub edges: Vec<EdgeSummary>,
    /// Records in each E/T/L phase and pipeline queue, keyed `e1.T`,
    /// `e1.QET` and so on.
    pub occupancy: BTreeMap<String, usize>,
    pub pool_depth: BTreeMap<String, usize>,
    pub allocation: BTreeMap<String, u32>,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    WindowMetrics(WindowMetrics),
    StateSummary(StateSummary),
    Ack {
        command: String,
        accepted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    /// A `run` budget was used up.
    RunComplete {
        tick: u64,
    },
    Error {
        message: String,
    },
}

impl Event {
    /// Window metrics and run completions go to every client; everything
    /// else answers the client that sent the command.
    pub fn is_broadcast(&self) -> bool {
        matches!(self, Event::WindowMetrics(_) | Event::RunComplete { .. })
    }

    fn ack(command: &str) -> Event {
        Event::Ack {
            command: command.to_string(),
            accepted: true,
            reason: None,
        }
    }

    fn nack(command: &str, reason: impl Into<String>) -> Event {
        Event::Ack {
            command: command.to_string(),
            accepted: false,
            reason: Some(reason.into()),
        }
    }
}

/// One event as a single line (no trailing newline). A non-zero
/// `dropped_events` is added as an extra field.
pub fn encode_event(event: &Event, dropped_events: u64) -> String {
    let mut v = serde_json::to_value(event).expect("event serializes");
    if dropped_events > 0 {
        if let Some(obj) = v.as_object_mut() {
            obj.insert("dropped_events".into(), dropped_events.into());
        }
    }
    v.to_string()
}

/// Parses one event line, ignoring any `dropped_events` field.
pub fn decode_event(line: &str) -> Result<Event, serde_json::Error> {
    let mut v: serde_json::Value = serde_json::from_str(line)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("dropped_events");
    }
    serde_json::from_value(v)
}

/// A command line and the tick at which it was applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tick: u64,
    pub line: String,
}

/// The protocol state machine around one simulation.
pub struct ControlCore {
    scenario: Scenario,
    sim: Simulation,
    allocation: Allocation,
    window: u64,
    remaining: u64,
    ticks_per_second: u64,
    transcript: Vec<TranscriptEntry>,
}

impl ControlCore {
    /// Starts idle at tick 0 with the scenario's initial allocation.
    pub fn new(scenario: Scenario, window: u64) -> Result<Self, EngineError> {
        if window == 0 {
            return Err(EngineError::BadWindow);
        }
        let sim = scenario.simulation(None)?;
        Ok(ControlCore {
            allocation: scenario.initial_allocation().clone(),
            scenario,
            sim,
            window,
            remaining: 0,
            ticks_per_second: DEFAULT_TICKS_PER_SECOND,
            transcript: Vec::new(),
        })
    }

    pub fn tick(&self) -> u64 {
        self.sim.tick()
    }

    pub fn is_running(&self) -> bool {
        self.remaining > 0
    }

    pub fn ticks_per_second(&self) -> u64 {
        self.ticks_per_second
    }

    pub fn allocation(&self) -> &Allocation {
        &self.allocation
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    /// Handles one raw protocol line. Malformed input yields an `error`
    /// event and leaves the state untouched.
    pub fn handle_line(&mut self, line: &str) -> Vec<Event> {
        self.transcript.push(TranscriptEntry {
            tick: self.sim.tick(),
            line: line.to_string(),
        });
        match serde_json::from_str::<ControlMessage>(line) {
            Ok(msg) => self.handle(msg),
            Err(e) => vec![Event::Error {
                message: format!("malformed message: {e}"),
            }],
        }
    }

    /// Applies one command. The first event is always its ack.
    pub fn handle(&mut self, msg: ControlMessage) -> Vec<Event> {
        let name = msg.name();
        match msg {
            ControlMessage::SetAllocation { alloc } => {
                let graph = self.sim.graph().clone();
                match self.allocation.patch(&graph, &alloc) {
                    Ok(()) => vec![Event::ack(name)],
                    Err(e) => vec![Event::nack(name, e.to_string())],
                }
            }
            ControlMessage::Run { ticks: 0 } => {
                vec![Event::nack(name, "ticks must be >= 1")]
            }
            ControlMessage::Run { ticks } => {
                self.remaining = self.remaining.saturating_add(ticks);
                vec![Event::ack(name)]
            }
            ControlMessage::Pause {} => {
                self.remaining = 0;
                vec![Event::ack(name)]
            }
            ControlMessage::Reset { seed } => {
                self.sim.reset(seed);
                self.allocation = self.scenario.initial_allocation().clone();
                self.remaining = 0;
                vec![Event::ack(name)]
            }
            ControlMessage::Snapshot {} => {
                vec![Event::ack(name), Event::StateSummary(self.summary())]
            }
            ControlMessage::SetPace {
                ticks_per_second: 0,
            } => {
                vec![Event::nack(name, "ticks_per_second must be >= 1")]
            }
            ControlMessage::SetPace { ticks_per_second } => {
                self.ticks_per_second = ticks_per_second;
                vec![Event::ack(name)]
            }
        }
    }

    /// Executes one tick if a run is in progress, returning the window
    /// metrics and completion events it caused.
    pub fn advance(&mut self) -> Vec<Event> {
        if self.remaining == 0 {
            return Vec::new();
        }
        if let Err(e) = self.sim.step(&self.allocation) {
            self.remaining = 0;
            return vec![Event::Error {
                message: e.to_string(),
            }];
        }
        self.remaining -= 1;
        let mut out = Vec::new();
        if self.sim.tick() - self.sim.window_start() >= self.window {
            out.push(Event::WindowMetrics(self.sim.take_window_metrics()));
        }
        if self.remaining == 0 {
            out.push(Event::RunComplete {
                tick: self.sim.tick(),
            });
        }
        out
    }

    pub fn summary(&self) -> StateSummary {
        let graph = self.sim.graph();
        let state = self.sim.state();
        let mut occupancy = BTreeMap::new();
        let mut pool_depth = BTreeMap::new();
        for (i, phase) in graph.phases().iter().enumerate() {
            if phase.kind == PhaseKind::Pool {
                pool_depth.insert(phase.owner.clone(), state.population(i));
            } else {
                occupancy.insert(phase.to_string(), state.population(i));
            }
        }
        StateSummary {
            tick: self.sim.tick(),
            running: self.is_running(),
            remaining_ticks: self.remaining,
            ticks_per_second: self.ticks_per_second,
            edges: graph
                .graph()
                .edges
                .iter()
                .map(|e| EdgeSummary {
                    id: e.id.clone(),
                    from: e.from.clone(),
                    to: e.to.clone(),
                })
                .collect(),
            occupancy,
            pool_depth,
            allocation: self.allocation.to_map(graph),
        }
    }

    /// Threads assigned to `edge`'s `stage` in the live allocation.
    pub fn threads(&self, edge: &str, stage: Stage) -> Option<u32> {
        let e = self.sim.graph().edge_position(edge)?;
        Some(self.allocation.get(e, stage))
    }
}

/// Re-executes a transcript: before each entry the simulation runs until
/// the entry's tick (or until idle), then the line is applied. Remaining
/// run budget is executed at the end.
pub fn replay(
    scenario: &Scenario,
    window: u64,
    transcript: &[TranscriptEntry],
) -> Result<Vec<Event>, EngineError> {
    let mut core = ControlCore::new(scenario.clone(), window)?;
    let mut out = Vec::new();
    for entry in transcript {
        while core.is_running() && core.tick() < entry.tick {
            out.extend(core.advance());
        }
        out.extend(core.handle_line(&entry.line));
    }
    while core.is_running() {
        out.extend(core.advance());
    }
    Ok(out)
}

/// Parses a transcript stored as JSON lines.
pub fn read_transcript(text: &str) -> Result<Vec<TranscriptEntry>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn write_transcript(entries: &[TranscriptEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("transcript serializes"));
        out.push('\n');
    }
    out
}
