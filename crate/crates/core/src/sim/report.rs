use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::planner::SwapPlan;
use crate::ready::{ps_to_seconds, Ps};

use super::{SimError, SimEvent, SimMode, SimSummary};

pub const TRACE_HEADER: &str = "time_s,stream,kind,subject,mem_used_bytes";

/// Exact decimal rendering of a picosecond count.
pub fn format_seconds(ps: Ps) -> String {
    format!("{}.{:012}", ps / 1_000_000_000_000, ps % 1_000_000_000_000)
}

pub fn write_trace_csv<W: Write>(mut w: W, events: &[SimEvent]) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for e in events {
        writeln!(
            w,
            "{},{},{},{},{}",
            format_seconds(e.time),
            e.stream.as_str(),
            e.kind.as_str(),
            e.subject,
            e.mem_used_after
        )?;
    }
    Ok(())
}

/// Used bytes over time plus the cumulative allocated and freed curves.
pub fn write_memory_csv<W: Write>(mut w: W, summary: &SimSummary) -> std::io::Result<()> {
    writeln!(w, "time_s,used_bytes,allocated_total_bytes,freed_total_bytes")?;
    for s in &summary.mem_timeseries {
        writeln!(
            w,
            "{},{},{},{}",
            format_seconds(s.time),
            s.used,
            s.allocated_total,
            s.freed_total
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StallRow {
    pub phase: u32,
    pub data_ready_s: f64,
    pub kernel_start_s: f64,
    pub stall_s: f64,
}

/// Per-phase stall: how long each kernel waited after its predecessor ended.
pub fn stall_report(summary: &SimSummary) -> Result<Vec<StallRow>, SimError> {
    if summary.oom {
        return Err(SimError::Oom);
    }
    Ok(summary
        .per_phase_stall_ps
        .iter()
        .enumerate()
        .map(|(i, &stall)| StallRow {
            phase: i as u32 + 1,
            data_ready_s: ps_to_seconds(summary.data_ready_ps[i]),
            kernel_start_s: ps_to_seconds(summary.kernel_start_ps[i]),
            stall_s: ps_to_seconds(stall),
        })
        .collect())
}

pub fn write_stall_csv<W: Write>(mut w: W, summary: &SimSummary) -> Result<(), SimError> {
    stall_report(summary)?;
    let io = |e: std::io::Error| SimError::Invariant(format!("write failed: {e}"));
    writeln!(w, "phase,data_ready_s,kernel_start_s,stall_s").map_err(io)?;
    for (i, &stall) in summary.per_phase_stall_ps.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{}",
            i + 1,
            format_seconds(summary.data_ready_ps[i]),
            format_seconds(summary.kernel_start_ps[i]),
            format_seconds(stall)
        )
        .map_err(io)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub oom: bool,
    pub total_stall_s: f64,
    pub iter_time_s: f64,
    pub stall_fraction: f64,
    pub tolerance: f64,
    pub peak_mem_bytes: u64,
    pub budget_bytes: u64,
    /// Simulated data-ready time minus planned ready time, per phase.
    pub ready_deviation_s: Vec<f64>,
    pub stalled_phases: Vec<u32>,
}

/// Checks a dynamic-mode run against its plan.
pub fn verify_plan(plan: &SwapPlan, summary: &SimSummary, tolerance: f64) -> Result<Verdict, SimError> {
    if summary.mode != SimMode::Dynamic {
        return Err(SimError::ModeMismatch(summary.mode));
    }
    if summary.k != plan.k_star {
        return Err(SimError::MinibatchMismatch {
            plan: plan.k_star,
            sim: summary.k,
        });
    }
    let stall = summary.total_stall();
    let iter = summary.iter_time();
    let fraction = if iter > 0.0 { stall / iter } else { 0.0 };
    let deviation = summary
        .data_ready_ps
        .iter()
        .zip(&plan.t_ready_s)
        .map(|(&sim, &planned)| ps_to_seconds(sim) - planned)
        .collect();
    let stalled = summary
        .per_phase_stall_ps
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0)
        .map(|(i, _)| i as u32 + 1)
        .collect();
    let pass = !summary.oom
        && stall <= tolerance * iter
        && summary.peak_mem_bytes <= plan.budget_bytes;
    Ok(Verdict {
        pass,
        oom: summary.oom,
        total_stall_s: stall,
        iter_time_s: iter,
        stall_fraction: fraction,
        tolerance,
        peak_mem_bytes: summary.peak_mem_bytes,
        budget_bytes: plan.budget_bytes,
        ready_deviation_s: deviation,
        stalled_phases: stalled,
    })
}
