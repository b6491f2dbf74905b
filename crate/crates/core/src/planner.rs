//! Minibatch selection and pinning.
//!
//! Feasibility at minibatch `k`: the active area is the layer-wise peak with
//! nothing pinned, pinned featuremaps reserve their bytes for the whole
//! iteration in the remaining (residual) budget, and every phase must have its
//! data ready no later than the stall-free start of its kernel.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmap::{
    peak_layerwise_memory, running_usage, Gmap, GmapError, ObjectId, ObjectKind, PinSet,
    PinnedAccounting,
};
use crate::hardware::HardwareSpec;
use crate::perf::{iteration_count, PerfError, PerfModel, TrainingConfig};
use crate::ready::{
    compute_t_ready_with, compute_times_ps, cumulative, ps_to_seconds, transfer_ps, Ps,
    ReadyError, ReadySchedule,
};
use crate::FORMAT_VERSION;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("length mismatch: {0} ready times vs {1} compute times")]
    LengthMismatch(usize, usize),
    #[error("featuremap footprint at the peak is zero; minibatch is unbounded")]
    ZeroFootprint,
    #[error("budget {budget} does not exceed fixed overheads {fixed}")]
    BudgetBelowFixed { budget: u64, fixed: u64 },
    #[error("search step must be positive")]
    ZeroStep,
    #[error(transparent)]
    Gmap(#[from] GmapError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Ready(#[from] ReadyError),
}

/// Result of the running-sum memory check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryCheck {
    pub ok: bool,
    pub peak_bytes: u64,
    pub first_violation_seq: Option<u32>,
}

/// Running-sum check of the op sequence against `budget`; pinned objects are
/// charged from allocation to release.
pub fn check_memory_constraint(
    gmap: &Gmap,
    k: u32,
    budget: u64,
    pins: &PinSet,
) -> Result<MemoryCheck, GmapError> {
    let usage = running_usage(gmap, k, pins, PinnedAccounting::Lifetime)?;
    let first = usage.iter().position(|&u| u > budget);
    Ok(MemoryCheck {
        ok: first.is_none(),
        peak_bytes: usage.iter().copied().max().unwrap_or(0),
        first_violation_seq: first.map(|i| gmap.ops()[i].seq),
    })
}

/// Phases (1-based) whose ready time exceeds the cumulative compute time of
/// the phases before them.
pub fn check_stall_constraint(t_ready: &[f64], compute: &[f64]) -> Result<BTreeSet<u32>, PlanError> {
    if t_ready.len() != compute.len() {
        return Err(PlanError::LengthMismatch(t_ready.len(), compute.len()));
    }
    let mut before = 0.0;
    let mut out = BTreeSet::new();
    for (j, (&t, &c)) in t_ready.iter().zip(compute).enumerate() {
        if t > before {
            out.insert(j as u32 + 1);
        }
        before += c;
    }
    Ok(out)
}

/// Integer version of [`check_stall_constraint`].
pub fn stall_violations(t_ready: &[Ps], cum: &[Ps]) -> BTreeSet<u32> {
    t_ready
        .iter()
        .enumerate()
        .filter(|&(j, &t)| t > cum[j])
        .map(|(j, _)| j as u32 + 1)
        .collect()
}

/// Per-phase slack in seconds: cumulative compute before the phase minus its
/// ready time. Negative slack is a stall.
pub fn stall_slack(t_ready: &[Ps], cum: &[Ps]) -> Vec<f64> {
    t_ready
        .iter()
        .enumerate()
        .map(|(j, &t)| ps_to_seconds(cum[j]) - ps_to_seconds(t))
        .collect()
}

/// `floor(k_base * (budget - others - para - ws) / fm_base)`.
pub fn k_max_from_terms(
    budget: u64,
    m_others: u64,
    m_para: u64,
    m_ws: u64,
    fm_at_k_base: u64,
    k_base: u32,
) -> Result<u32, PlanError> {
    if fm_at_k_base == 0 {
        return Err(PlanError::ZeroFootprint);
    }
    let fixed = m_others + m_para + m_ws;
    if budget <= fixed {
        return Err(PlanError::BudgetBelowFixed { budget, fixed });
    }
    let k = k_base as u128 * (budget - fixed) as u128 / fm_at_k_base as u128;
    Ok(u32::try_from(k).unwrap_or(u32::MAX))
}

/// Bytes that stay on the device regardless of `k`.
pub fn fixed_overhead(gmap: &Gmap, hw: &HardwareSpec) -> u64 {
    hw.m_others + gmap.resident_bytes()
}

/// Largest `k` whose layer-wise peak fits next to the fixed overheads.
/// Returns `Ok(0)` when not even `k = 1` fits.
pub fn max_trainable_minibatch(gmap: &Gmap, budget: u64, hw: &HardwareSpec) -> Result<u32, PlanError> {
    let fixed = fixed_overhead(gmap, hw);
    if budget <= fixed {
        return Ok(0);
    }
    let empty = PinSet::new();
    let k_base = gmap.k_base();
    let at_base = peak_layerwise_memory(gmap, k_base, &empty)?;
    let live_fm: u64 = at_base
        .live
        .iter()
        .filter(|id| gmap.object(**id).is_some_and(|o| o.kind == ObjectKind::Featuremap))
        .map(|id| gmap.scaled_size(*id, k_base))
        .sum::<Result<u64, _>>()?;
    if live_fm == 0 {
        return Err(PlanError::ZeroFootprint);
    }
    // every object scales with k, so the whole peak set goes in the denominator
    let estimate = k_max_from_terms(budget, fixed, 0, 0, at_base.bytes, k_base)?;
    let fits = |k: u32| -> Result<bool, GmapError> {
        Ok(fixed as u128 + peak_layerwise_memory(gmap, k, &empty)?.bytes as u128 <= budget as u128)
    };
    if !fits(1)? {
        return Ok(0);
    }
    let mut lo = 1u32;
    let mut hi = estimate.clamp(2, u32::MAX / 2);
    while fits(hi)? {
        lo = hi;
        if hi >= u32::MAX / 2 {
            return Ok(hi);
        }
        hi = hi.saturating_mul(2).min(u32::MAX / 2);
    }
    // lo fits, hi does not
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Everything the search needs besides `k`.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub gmap: &'a Gmap,
    pub hw: &'a HardwareSpec,
    pub model: &'a PerfModel,
    pub budget: u64,
    pub training: TrainingConfig,
}

impl PlanContext<'_> {
    pub fn fixed(&self) -> u64 {
        fixed_overhead(self.gmap, self.hw)
    }
}

/// Outcome of the pinning loop at a single `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KEvaluation {
    pub k: u32,
    pub feasible: bool,
    /// False when the active area alone exceeds the budget.
    pub memory_ok: bool,
    pub pins: PinSet,
    pub active_area: u64,
    pub residual: u64,
    pub pinned_bytes: u64,
    pub compute: Vec<Ps>,
    pub schedule: Option<ReadySchedule>,
    pub violating: BTreeSet<u32>,
}

impl KEvaluation {
    pub fn cumulative(&self) -> Vec<Ps> {
        cumulative(&self.compute)
    }
}

/// Featuremaps whose swaps take part in phases up to the last violating one,
/// largest transfer first.
fn pin_candidates(gmap: &Gmap, k: u32, pins: &PinSet, violating: &BTreeSet<u32>) -> Result<Vec<(u64, ObjectId)>, GmapError> {
    let Some(&last) = violating.last() else {
        return Ok(Vec::new());
    };
    let n = gmap.num_layers();
    let mut out = Vec::new();
    for o in gmap.featuremaps() {
        let i = o.id.layer;
        if pins.contains(&o.id) {
            continue;
        }
        if i <= last || 2 * n + 1 - i <= last {
            out.push((gmap.scaled_size(o.id, k)?, o.id));
        }
    }
    out.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(out)
}

/// Checks `k` and pins greedily until no phase stalls or nothing more fits.
pub fn evaluate_k(ctx: &PlanContext<'_>, k: u32) -> Result<KEvaluation, PlanError> {
    let gmap = ctx.gmap;
    let fixed = ctx.fixed();
    let active_area = peak_layerwise_memory(gmap, k, &PinSet::new())?.bytes;
    let compute = compute_times_ps(gmap, k, ctx.model)?;
    let cum = cumulative(&compute);
    let mut eval = KEvaluation {
        k,
        feasible: false,
        memory_ok: false,
        pins: PinSet::new(),
        active_area,
        residual: 0,
        pinned_bytes: 0,
        compute,
        schedule: None,
        violating: BTreeSet::new(),
    };
    if fixed as u128 + active_area as u128 > ctx.budget as u128 {
        return Ok(eval);
    }
    eval.memory_ok = true;
    eval.residual = ctx.budget - fixed - active_area;
    let bw = ctx.model.bandwidth_avail;
    loop {
        let sched = compute_t_ready_with(gmap, k, active_area, &eval.pins, bw, &eval.compute)?;
        eval.violating = stall_violations(&sched.t_ready, &cum);
        eval.schedule = Some(sched);
        if eval.violating.is_empty() {
            eval.feasible = true;
            return Ok(eval);
        }
        let room = eval.residual - eval.pinned_bytes;
        let pick = pin_candidates(gmap, k, &eval.pins, &eval.violating)?
            .into_iter()
            .find(|&(size, _)| size <= room);
        match pick {
            Some((size, id)) => {
                eval.pins.insert(id);
                eval.pinned_bytes += size;
            }
            None => return Ok(eval),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnedObject {
    pub id: ObjectId,
    pub bytes: u64,
    /// Per-direction copy time avoided by pinning, seconds.
    pub transfer_s: f64,
}

/// The chosen minibatch with its pin set and predicted timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapPlan {
    pub format_version: u32,
    pub k_star: u32,
    pub k_max: u32,
    pub k_base: u32,
    pub budget_bytes: u64,
    pub fixed_bytes: u64,
    pub active_area_bytes: u64,
    pub residual_bytes: u64,
    pub pinned_bytes: u64,
    pub pinned: Vec<PinnedObject>,
    pub bandwidth_avail: f64,
    pub t_ready_s: Vec<f64>,
    pub compute_s: Vec<f64>,
    pub slack_s: Vec<f64>,
    pub predicted_iter_time_s: f64,
    pub predicted_whole_time_s: f64,
    pub iterations: u64,
}

impl SwapPlan {
    pub fn pins(&self) -> PinSet {
        self.pinned.iter().map(|p| p.id).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Fraction of featuremap bytes (at `k_star`) that are pinned.
    pub fn pinned_fraction(&self, gmap: &Gmap) -> Result<f64, GmapError> {
        let total: u64 = gmap
            .featuremaps()
            .map(|o| gmap.scaled_size(o.id, self.k_star))
            .sum::<Result<u64, _>>()?;
        Ok(if total == 0 {
            0.0
        } else {
            self.pinned_bytes as f64 / total as f64
        })
    }
}

/// Builds the plan document from a feasible evaluation.
pub fn plan_from_evaluation(
    ctx: &PlanContext<'_>,
    eval: &KEvaluation,
    k_max: u32,
) -> Result<SwapPlan, PlanError> {
    let gmap = ctx.gmap;
    let bw = ctx.model.bandwidth_avail;
    let cum = eval.cumulative();
    let t_ready: Vec<Ps> = eval
        .schedule
        .as_ref()
        .map(|s| s.t_ready.clone())
        .unwrap_or_default();
    let pinned = eval
        .pins
        .iter()
        .map(|&id| {
            let bytes = gmap.scaled_size(id, eval.k)?;
            Ok(PinnedObject {
                id,
                bytes,
                transfer_s: ps_to_seconds(transfer_ps(bytes, bw)),
            })
        })
        .collect::<Result<Vec<_>, GmapError>>()?;
    let iter = ps_to_seconds(*cum.last().unwrap_or(&0));
    let iterations = iteration_count(&ctx.training, eval.k)?;
    Ok(SwapPlan {
        format_version: FORMAT_VERSION,
        k_star: eval.k,
        k_max,
        k_base: gmap.k_base(),
        budget_bytes: ctx.budget,
        fixed_bytes: ctx.fixed(),
        active_area_bytes: eval.active_area,
        residual_bytes: eval.residual,
        pinned_bytes: eval.pinned_bytes,
        pinned,
        bandwidth_avail: bw,
        t_ready_s: t_ready.iter().map(|&t| ps_to_seconds(t)).collect(),
        compute_s: eval.compute.iter().map(|&c| ps_to_seconds(c)).collect(),
        slack_s: stall_slack(&t_ready, &cum),
        predicted_iter_time_s: iter,
        predicted_whole_time_s: iterations as f64 * (iter + ctx.training.delta_sync),
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PlanOutcome {
    Planned(Box<SwapPlan>),
    /// Not even `k = 1` fits the layer-wise peak.
    Untrainable { budget_bytes: u64, required_bytes: u64 },
    /// Some `k` fits in memory but every one stalls.
    Infeasible { k_max: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOptions {
    /// Coarse stride; 1 is the plain downward scan.
    pub step: u32,
    pub parallel: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            step: 1,
            parallel: false,
        }
    }
}

/// Scans `ks` (descending) and returns the first feasible evaluation.
fn first_feasible(
    ctx: &PlanContext<'_>,
    ks: &[u32],
    parallel: bool,
) -> Result<Option<KEvaluation>, PlanError> {
    if !parallel {
        for &k in ks {
            let e = evaluate_k(ctx, k)?;
            if e.feasible {
                return Ok(Some(e));
            }
        }
        return Ok(None);
    }
    let width = rayon::current_num_threads().max(1) * 2;
    for chunk in ks.chunks(width) {
        let evals = chunk
            .par_iter()
            .map(|&k| evaluate_k(ctx, k))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(e) = evals.into_iter().find(|e| e.feasible) {
            return Ok(Some(e));
        }
    }
    Ok(None)
}

/// Downward search from `k_max` for the largest stall-free `k`.
pub fn find_efficiency_optimal_minibatch(
    ctx: &PlanContext<'_>,
    opts: SearchOptions,
) -> Result<PlanOutcome, PlanError> {
    if opts.step == 0 {
        return Err(PlanError::ZeroStep);
    }
    let gmap = ctx.gmap;
    let k_max = max_trainable_minibatch(gmap, ctx.budget, ctx.hw)?;
    if k_max == 0 {
        let need = ctx.fixed() + peak_layerwise_memory(gmap, 1, &PinSet::new())?.bytes;
        return Ok(PlanOutcome::Untrainable {
            budget_bytes: ctx.budget,
            required_bytes: need,
        });
    }
    let top = k_max.min(u32::try_from(ctx.training.dataset_size).unwrap_or(u32::MAX));
    log::debug!("k_max = {k_max}, searching from {top}");

    let found = if opts.step == 1 {
        let ks: Vec<u32> = (1..=top).rev().collect();
        first_feasible(ctx, &ks, opts.parallel)?
    } else {
        let coarse: Vec<u32> = (0..)
            .map(|i: u64| top as i64 - i as i64 * opts.step as i64)
            .take_while(|&k| k >= 1)
            .map(|k| k as u32)
            .collect();
        match first_feasible(ctx, &coarse, opts.parallel)? {
            Some(hit) => {
                let upper = hit.k.saturating_add(opts.step - 1).min(top);
                let fine: Vec<u32> = (hit.k + 1..=upper).rev().collect();
                first_feasible(ctx, &fine, opts.parallel)?.or(Some(hit))
            }
            None => {
                // below the last coarse point
                let last = *coarse.last().unwrap();
                let fine: Vec<u32> = (1..last).rev().collect();
                first_feasible(ctx, &fine, opts.parallel)?
            }
        }
    };
    match found {
        Some(e) => Ok(PlanOutcome::Planned(Box::new(plan_from_evaluation(ctx, &e, k_max)?))),
        None => Ok(PlanOutcome::Infeasible { k_max }),
    }
}

/// `ceil(iters_base / q)` with `q = k_star / k_base`.
pub fn adjust_iterations(k_star: u32, k_base: u32, iters_base: u64) -> u64 {
    assert!(k_star > 0 && k_base > 0, "minibatch sizes must be positive");
    (iters_base as u128 * k_base as u128).div_ceil(k_star as u128) as u64
}
