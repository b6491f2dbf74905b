//! Data-ready times for each phase.
//!
//! The swap-in stream walks the pre-kernel ops (allocate, prefetch) in GMAP
//! order and runs ahead of compute as far as memory allows. Memory comes back
//! through credits: releases at the owning phase's kernel end, and offloads
//! when their device-to-host copy finishes. Kernel ends are taken from the
//! stall-free cumulative compute times.
//!
//! All times are integer picoseconds.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use thiserror::Error;

use crate::gmap::{Gmap, GmapError, ObjectId, OpKind, PinSet};
use crate::perf::{phase_compute_times, PerfError, PerfModel};

pub type Ps = u64;

pub const PS_PER_SECOND: f64 = 1e12;

pub fn to_ps(seconds: f64) -> Ps {
    (seconds * PS_PER_SECOND).round() as Ps
}

pub fn ps_to_seconds(ps: Ps) -> f64 {
    ps as f64 / PS_PER_SECOND
}

/// Copy time of `bytes` at `bandwidth` bytes/s.
pub fn transfer_ps(bytes: u64, bandwidth: f64) -> Ps {
    to_ps(bytes as f64 / bandwidth)
}

#[derive(Debug, Error)]
pub enum ReadyError {
    #[error("phase {phase}: {need} bytes can never fit in an active area of {cap} bytes")]
    Untrainable { phase: u32, need: u64, cap: u64 },
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error(transparent)]
    Gmap(#[from] GmapError),
    #[error(transparent)]
    Perf(#[from] PerfError),
}

/// One pre-kernel op as seen by the swap-in stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapInOp {
    pub phase: u32,
    /// Bytes charged against the active area.
    pub bytes: u64,
    /// Host-to-device copy time; zero for allocations.
    pub transfer: Ps,
    /// Earliest start, e.g. the end of the object's offload.
    pub not_before: Ps,
}

/// Bytes returned to the active area at `time`. Only usable by ops of later
/// phases, since the free follows the kernel of `phase`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreeCredit {
    pub phase: u32,
    pub time: Ps,
    pub bytes: u64,
}

/// Per-phase data-ready times plus which phases had to wait for memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadySchedule {
    pub t_ready: Vec<Ps>,
    pub memory_blocked: Vec<bool>,
}

/// Runs the swap-in stream over `ops` (sorted by phase) against an active
/// area of `cap` bytes.
pub fn schedule_swap_in(
    num_phases: usize,
    ops: &[SwapInOp],
    credits: &[FreeCredit],
    cap: u64,
) -> Result<ReadySchedule, ReadyError> {
    let mut by_phase: Vec<Vec<&FreeCredit>> = vec![Vec::new(); num_phases + 1];
    for c in credits {
        if let Some(b) = by_phase.get_mut(c.phase as usize) {
            b.push(c);
        }
    }
    let mut pending: BinaryHeap<Reverse<(Ps, u64)>> = BinaryHeap::new();
    let mut used: u64 = 0;
    let mut t: Ps = 0;
    let mut t_ready = vec![0; num_phases];
    let mut blocked = vec![false; num_phases];
    let mut next = 0usize;

    for j in 1..=num_phases as u32 {
        for c in &by_phase[j as usize - 1] {
            pending.push(Reverse((c.time, c.bytes)));
        }
        while next < ops.len() && ops[next].phase == j {
            let op = ops[next];
            next += 1;
            let mut start = t.max(op.not_before);
            absorb(&mut pending, &mut used, start);
            while used + op.bytes > cap {
                let Some(&Reverse((when, _))) = pending.peek() else {
                    return Err(ReadyError::Untrainable {
                        phase: j,
                        need: used + op.bytes,
                        cap,
                    });
                };
                blocked[j as usize - 1] = true;
                start = start.max(when);
                absorb(&mut pending, &mut used, start);
            }
            used += op.bytes;
            t = start.saturating_add(op.transfer);
        }
        t_ready[j as usize - 1] = t;
    }
    Ok(ReadySchedule {
        t_ready,
        memory_blocked: blocked,
    })
}

fn absorb(pending: &mut BinaryHeap<Reverse<(Ps, u64)>>, used: &mut u64, now: Ps) {
    while let Some(&Reverse((when, bytes))) = pending.peek() {
        if when > now {
            break;
        }
        pending.pop();
        *used = used.saturating_sub(bytes);
    }
}

/// `C[0] = 0`, `C[j] = sum of compute[..j]`.
pub fn cumulative(compute: &[Ps]) -> Vec<Ps> {
    let mut out = Vec::with_capacity(compute.len() + 1);
    out.push(0);
    let mut acc = 0;
    for &c in compute {
        acc += c;
        out.push(acc);
    }
    out
}

/// Per-phase compute times at `k`, in picoseconds.
pub fn compute_times_ps(gmap: &Gmap, k: u32, model: &PerfModel) -> Result<Vec<Ps>, PerfError> {
    Ok(phase_compute_times(gmap.phases(), k, model)?
        .into_iter()
        .map(to_ps)
        .collect())
}

/// Offload completion times under stall-free compute; the device-to-host
/// channel is FIFO in GMAP order.
pub fn offload_ends(
    gmap: &Gmap,
    k: u32,
    pins: &PinSet,
    bandwidth: f64,
    cum: &[Ps],
) -> Result<BTreeMap<ObjectId, Ps>, GmapError> {
    let mut free_at: Ps = 0;
    let mut out = BTreeMap::new();
    for op in gmap.ops() {
        if op.kind != OpKind::Offload || pins.contains(&op.object) {
            continue;
        }
        let size = gmap.scaled_size(op.object, k)?;
        let start = cum[op.phase as usize].max(free_at);
        free_at = start.saturating_add(transfer_ps(size, bandwidth));
        out.insert(op.object, free_at);
    }
    Ok(out)
}

/// Swap-in ops and free credits for a GMAP. Pinned objects live outside the
/// active area and contribute nothing.
pub fn swap_in_inputs(
    gmap: &Gmap,
    k: u32,
    pins: &PinSet,
    bandwidth: f64,
    cum: &[Ps],
) -> Result<(Vec<SwapInOp>, Vec<FreeCredit>), ReadyError> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(ReadyError::BadBandwidth(bandwidth));
    }
    let offloads = offload_ends(gmap, k, pins, bandwidth, cum)?;
    let mut ops = Vec::new();
    let mut credits = Vec::new();
    for op in gmap.ops() {
        if pins.contains(&op.object) {
            continue;
        }
        let bytes = gmap.scaled_size(op.object, k)?;
        match op.kind {
            OpKind::Allocate => ops.push(SwapInOp {
                phase: op.phase,
                bytes,
                transfer: 0,
                not_before: 0,
            }),
            OpKind::Prefetch => ops.push(SwapInOp {
                phase: op.phase,
                bytes,
                transfer: transfer_ps(bytes, bandwidth),
                not_before: offloads.get(&op.object).copied().unwrap_or(0),
            }),
            OpKind::Offload => credits.push(FreeCredit {
                phase: op.phase,
                time: offloads[&op.object],
                bytes,
            }),
            OpKind::Release => credits.push(FreeCredit {
                phase: op.phase,
                time: cum[op.phase as usize],
                bytes,
            }),
        }
    }
    Ok((ops, credits))
}

/// Data-ready time of every phase at minibatch `k`, with an active area of
/// `budget` bytes.
pub fn compute_t_ready(
    gmap: &Gmap,
    k: u32,
    budget: u64,
    pins: &PinSet,
    model: &PerfModel,
) -> Result<ReadySchedule, ReadyError> {
    let compute = compute_times_ps(gmap, k, model)?;
    compute_t_ready_with(gmap, k, budget, pins, model.bandwidth_avail, &compute)
}

/// As [`compute_t_ready`] with compute times supplied by the caller.
pub fn compute_t_ready_with(
    gmap: &Gmap,
    k: u32,
    budget: u64,
    pins: &PinSet,
    bandwidth: f64,
    compute: &[Ps],
) -> Result<ReadySchedule, ReadyError> {
    let cum = cumulative(compute);
    let (ops, credits) = swap_in_inputs(gmap, k, pins, bandwidth, &cum)?;
    schedule_swap_in(gmap.num_phases(), &ops, &credits, budget)
}
