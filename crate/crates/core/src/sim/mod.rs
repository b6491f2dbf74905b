//! Discrete-event simulation of one training iteration.
//!
//! Three streams run concurrently: compute executes phases in order, swap-in
//! issues allocations and prefetches in GMAP order, and swap-out copies
//! offloaded featuremaps to the host and frees released objects. Each copy
//! direction is a FIFO channel. Time is integer picoseconds.

mod engine;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmap::{GmapError, ObjectId};
use crate::perf::PerfError;
use crate::ready::{ps_to_seconds, Ps};

pub use engine::{simulate_iteration, simulate_with_compute};
pub use report::{
    format_seconds, stall_report, verify_plan, write_memory_csv, write_stall_csv, write_trace_csv,
    StallRow, Verdict, TRACE_HEADER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Every featuremap is swapped.
    Naive,
    /// The plan's pin set stays resident, the rest is swapped.
    Dynamic,
    /// Nothing is swapped.
    Resident,
}

impl SimMode {
    pub const ALL: [SimMode; 3] = [SimMode::Naive, SimMode::Dynamic, SimMode::Resident];

    pub fn as_str(self) -> &'static str {
        match self {
            SimMode::Naive => "naive",
            SimMode::Dynamic => "dynamic",
            SimMode::Resident => "resident",
        }
    }
}

impl fmt::Display for SimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(SimMode::Naive),
            "dynamic" => Ok(SimMode::Dynamic),
            "resident" => Ok(SimMode::Resident),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Device memory budget, bytes.
    pub budget: u64,
    /// Bytes held for the whole iteration (parameters, gradients, others).
    pub baseline: u64,
    pub mode: SimMode,
    /// Per-direction copy bandwidth, bytes/s.
    pub bandwidth: f64,
    /// Seconds per allocation.
    pub alloc_cost: f64,
    /// Optional cap on bytes of swapped (non-pinned) objects.
    pub active_area: Option<u64>,
}

impl SimConfig {
    pub fn new(budget: u64, baseline: u64, mode: SimMode, bandwidth: f64) -> Self {
        SimConfig {
            budget,
            baseline,
            mode,
            bandwidth,
            alloc_cost: 0.0,
            active_area: None,
        }
    }

    pub fn with_active_area(self, cap: u64) -> Self {
        SimConfig {
            active_area: Some(cap),
            ..self
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("inconsistent plan: {0}")]
    InconsistentPlan(String),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("allocation cost must be non-negative, got {0}")]
    BadAllocCost(f64),
    #[error("{expected} compute times expected, got {got}")]
    ComputeLength { expected: usize, got: usize },
    #[error("simulation ran out of memory")]
    Oom,
    #[error("verification needs a dynamic-mode run, got {0}")]
    ModeMismatch(SimMode),
    #[error("plan is for k = {plan}, simulation ran k = {sim}")]
    MinibatchMismatch { plan: u32, sim: u32 },
    #[error("internal invariant broken: {0}")]
    Invariant(String),
    #[error(transparent)]
    Gmap(#[from] GmapError),
    #[error(transparent)]
    Perf(#[from] PerfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Compute,
    SwapOut,
    SwapIn,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Compute => "compute",
            Stream::SwapOut => "swap_out",
            Stream::SwapIn => "swap_in",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    KernelStart,
    KernelEnd,
    XferStart,
    XferEnd,
    Alloc,
    Free,
    Block,
    Unblock,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::KernelStart => "kernel_start",
            EventKind::KernelEnd => "kernel_end",
            EventKind::XferStart => "xfer_start",
            EventKind::XferEnd => "xfer_end",
            EventKind::Alloc => "alloc",
            EventKind::Free => "free",
            EventKind::Block => "block",
            EventKind::Unblock => "unblock",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Phase(u32),
    Object(ObjectId),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Phase(j) => write!(f, "phase{j}"),
            Subject::Object(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: Ps,
    pub stream: Stream,
    pub kind: EventKind,
    pub subject: Subject,
    pub mem_used_after: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemSample {
    pub time: Ps,
    pub used: u64,
    pub allocated_total: u64,
    pub freed_total: u64,
}

/// What a stuck swap-in op was waiting for when the event queue ran dry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitGraph {
    pub blocked_op: String,
    pub blocked_phase: u32,
    pub need_bytes: u64,
    pub available_bytes: u64,
    /// Objects holding memory, each with the phase whose completion frees it.
    pub holders: Vec<(ObjectId, u32)>,
    /// Phase the compute stream is waiting to start.
    pub compute_waiting_on: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub mode: SimMode,
    pub k: u32,
    pub budget_bytes: u64,
    pub baseline_bytes: u64,
    pub iter_time_ps: Ps,
    pub kernel_time_ps: Ps,
    pub total_stall_ps: Ps,
    pub per_phase_stall_ps: Vec<Ps>,
    /// Time each phase's inputs and allocations became available.
    pub data_ready_ps: Vec<Ps>,
    pub kernel_start_ps: Vec<Ps>,
    pub peak_mem_bytes: u64,
    pub final_mem_bytes: u64,
    pub mem_timeseries: Vec<MemSample>,
    pub oom: bool,
    pub wait_graph: Option<WaitGraph>,
}

impl SimSummary {
    pub fn iter_time(&self) -> f64 {
        ps_to_seconds(self.iter_time_ps)
    }
    pub fn total_stall(&self) -> f64 {
        ps_to_seconds(self.total_stall_ps)
    }
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub events: Vec<SimEvent>,
    pub summary: SimSummary,
}
