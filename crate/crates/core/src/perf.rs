//! Throughput curves and timing queries.
//!
//! Each layer type gets a monotone (isotonic) FLOPS-vs-FLOPs curve fitted to
//! profiled samples, linearly interpolated between knots and flat outside
//! them. Rates are scaled by an efficiency factor to absorb launch overhead.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmap::{Gmap, GmapError, MemOp, OpKind, PinSet};
use crate::network::{LayerType, NetworkSpec, PhaseLayer};
use crate::profile::{effective_bandwidth, scale_flops, ComputeSample, ProfileError, ProfileSet};
use crate::FORMAT_VERSION;

pub const DEFAULT_EFFICIENCY: f64 = 0.95;

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("layer type {layer_type}: need at least 2 distinct FLOP values, got {distinct}")]
    InsufficientSamples { layer_type: LayerType, distinct: usize },
    #[error("layer type {0}: nonpositive compute rate")]
    NonPositiveRate(LayerType),
    #[error("efficiency factor must lie in (0, 1], got {0}")]
    BadEfficiency(f64),
    #[error("no throughput curve for layer type {0}")]
    MissingCurve(LayerType),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("minibatch size must be positive")]
    ZeroMinibatch,
    #[error("minibatch {k} exceeds dataset size {m}")]
    MinibatchExceedsDataset { k: u32, m: u64 },
    #[error("transfer time requested for a {0:?} op")]
    NotATransfer(OpKind),
    #[error("failed to read model {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported format_version {0}")]
    FormatVersion(u32),
    #[error(transparent)]
    Gmap(#[from] GmapError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Pool-adjacent-violators: the nondecreasing sequence closest to `values`
/// in weighted least squares.
pub fn isotonic_fit(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    // blocks of (mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() >= 2 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            let w = w1 + w2;
            blocks.truncate(blocks.len() - 2);
            blocks.push(((m1 * w1 + m2 * w2) / w, w, c1 + c2));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}

/// Saturating throughput curve for one layer type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputCurve {
    pub layer_type: LayerType,
    /// `(flops, flops_per_second)`, strictly increasing in flops,
    /// nondecreasing in rate. Rates are before the efficiency factor.
    pub knots: Vec<(f64, f64)>,
    pub plateau: f64,
    pub efficiency: f64,
}

impl ThroughputCurve {
    /// Builds a curve from explicit knots, enforcing the invariants.
    pub fn from_knots(
        layer_type: LayerType,
        mut knots: Vec<(f64, f64)>,
        efficiency: f64,
    ) -> Result<Self, PerfError> {
        check_efficiency(efficiency)?;
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        knots.dedup_by(|b, a| a.0 == b.0);
        if knots.is_empty() || knots.iter().any(|&(_, r)| !(r.is_finite() && r > 0.0)) {
            return Err(PerfError::NonPositiveRate(layer_type));
        }
        let rates: Vec<f64> = knots.iter().map(|k| k.1).collect();
        let fitted = isotonic_fit(&rates, &vec![1.0; rates.len()]);
        for (k, r) in knots.iter_mut().zip(fitted) {
            k.1 = r;
        }
        let plateau = knots.last().unwrap().1;
        Ok(ThroughputCurve {
            layer_type,
            knots,
            plateau,
            efficiency,
        })
    }

    /// Efficiency-adjusted rate at `flops`.
    pub fn rate(&self, flops: f64) -> f64 {
        self.raw_rate(flops) * self.efficiency
    }

    fn raw_rate(&self, flops: f64) -> f64 {
        let first = self.knots[0];
        if flops <= first.0 {
            return first.1;
        }
        let last = *self.knots.last().unwrap();
        if flops >= last.0 {
            return self.plateau;
        }
        let i = self.knots.partition_point(|k| k.0 <= flops);
        let (x0, y0) = self.knots[i - 1];
        let (x1, y1) = self.knots[i];
        y0 + (y1 - y0) * (flops - x0) / (x1 - x0)
    }
}

fn check_efficiency(eta: f64) -> Result<(), PerfError> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(PerfError::BadEfficiency(eta))
    }
}

/// Fits one curve from the samples of a single layer type. Samples with the
/// same FLOP count are merged (weighted by sample count).
pub fn fit_throughput_curve(
    layer_type: LayerType,
    samples: &[ComputeSample],
    efficiency: f64,
) -> Result<ThroughputCurve, PerfError> {
    check_efficiency(efficiency)?;
    let mut by_flops: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for s in samples {
        let rate = s.flops as f64 / s.time_s;
        if !(rate.is_finite() && rate > 0.0) {
            return Err(PerfError::NonPositiveRate(layer_type));
        }
        let e = by_flops.entry(s.flops).or_insert((0.0, 0.0));
        e.0 += rate;
        e.1 += 1.0;
    }
    if by_flops.len() < 2 {
        return Err(PerfError::InsufficientSamples {
            layer_type,
            distinct: by_flops.len(),
        });
    }
    let xs: Vec<f64> = by_flops.keys().map(|&f| f as f64).collect();
    let means: Vec<f64> = by_flops.values().map(|(sum, n)| sum / n).collect();
    let weights: Vec<f64> = by_flops.values().map(|(_, n)| *n).collect();
    let fitted = isotonic_fit(&means, &weights);
    let knots: Vec<(f64, f64)> = xs.into_iter().zip(fitted).collect();
    let plateau = knots.last().unwrap().1;
    Ok(ThroughputCurve {
        layer_type,
        knots,
        plateau,
        efficiency,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfModel {
    pub format_version: u32,
    pub k_base: u32,
    /// Effective interconnect bandwidth, bytes per second.
    pub bandwidth_avail: f64,
    pub curves: BTreeMap<LayerType, ThroughputCurve>,
}

#[derive(Serialize, Deserialize)]
struct PerfModelDoc {
    format_version: u32,
    k_base: u32,
    bandwidth_avail: f64,
    curves: Vec<ThroughputCurve>,
}

impl PerfModel {
    pub fn new(
        k_base: u32,
        bandwidth_avail: f64,
        curves: impl IntoIterator<Item = ThroughputCurve>,
    ) -> Result<Self, PerfError> {
        if !(bandwidth_avail.is_finite() && bandwidth_avail > 0.0) {
            return Err(PerfError::BadBandwidth(bandwidth_avail));
        }
        if k_base == 0 {
            return Err(PerfError::ZeroMinibatch);
        }
        Ok(PerfModel {
            format_version: FORMAT_VERSION,
            k_base,
            bandwidth_avail,
            curves: curves
                .into_iter()
                .map(|c| (c.layer_type.clone(), c))
                .collect(),
        })
    }

    /// Fits one curve per layer type found in `profiles`.
    pub fn fit(
        profiles: &ProfileSet,
        k_base: u32,
        efficiency: f64,
        fallback_bandwidth: f64,
    ) -> Result<Self, PerfError> {
        let mut by_type: BTreeMap<LayerType, Vec<ComputeSample>> = BTreeMap::new();
        for s in &profiles.compute_samples {
            by_type.entry(s.layer_type.clone()).or_default().push(s.clone());
        }
        let curves = by_type
            .into_iter()
            .map(|(ty, samples)| fit_throughput_curve(ty, &samples, efficiency))
            .collect::<Result<Vec<_>, _>>()?;
        let bw = effective_bandwidth(&profiles.transfer_samples, fallback_bandwidth);
        PerfModel::new(k_base, bw, curves)
    }

    pub fn with_bandwidth(&self, bandwidth_avail: f64) -> Result<Self, PerfError> {
        PerfModel::new(k_base_of(self), bandwidth_avail, self.curves.values().cloned())
    }

    pub fn curve(&self, ty: &LayerType) -> Result<&ThroughputCurve, PerfError> {
        self.curves
            .get(ty)
            .ok_or_else(|| PerfError::MissingCurve(ty.clone()))
    }

    /// Errors with the first layer type of `spec` lacking a curve.
    pub fn check_covers(&self, spec: &NetworkSpec) -> Result<(), PerfError> {
        for ty in spec.layer_types() {
            self.curve(&ty)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = PerfModelDoc {
            format_version: self.format_version,
            k_base: self.k_base,
            bandwidth_avail: self.bandwidth_avail,
            curves: self.curves.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PerfError> {
        let doc: PerfModelDoc = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(PerfError::FormatVersion(doc.format_version));
        }
        let curves = doc
            .curves
            .into_iter()
            .map(|c| ThroughputCurve::from_knots(c.layer_type, c.knots, c.efficiency))
            .collect::<Result<Vec<_>, _>>()?;
        PerfModel::new(doc.k_base, doc.bandwidth_avail, curves)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PerfError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PerfError::Io {
            path: path.display().to_string(),
            source,
        })?;
        PerfModel::from_json(&text)
    }
}

fn k_base_of(m: &PerfModel) -> u32 {
    m.k_base
}

/// `t_j(k) = FLOPs_j(k) / FLOPS(FLOPs_j(k))`.
pub fn layer_compute_time(phase: &PhaseLayer, k: u32, model: &PerfModel) -> Result<f64, PerfError> {
    let flops = scale_flops(phase, k, model.k_base)? as f64;
    let curve = model.curve(&phase.layer_type)?;
    Ok(flops / curve.rate(flops))
}

/// Per-phase compute times at `k`.
pub fn phase_compute_times(
    phases: &[PhaseLayer],
    k: u32,
    model: &PerfModel,
) -> Result<Vec<f64>, PerfError> {
    phases
        .iter()
        .map(|p| layer_compute_time(p, k, model))
        .collect()
}

/// Stall-free iteration time: the sum of per-phase compute times.
pub fn iteration_time(phases: &[PhaseLayer], k: u32, model: &PerfModel) -> Result<f64, PerfError> {
    Ok(phase_compute_times(phases, k, model)?.iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: u32,
    pub dataset_size: u64,
    /// Per-iteration synchronization overhead, seconds.
    pub delta_sync: f64,
}

/// Number of iterations for `epochs` passes over `m` samples at minibatch `k`;
/// the final partial minibatch counts as a full iteration.
pub fn iteration_count(cfg: &TrainingConfig, k: u32) -> Result<u64, PerfError> {
    if k == 0 {
        return Err(PerfError::ZeroMinibatch);
    }
    if k as u64 > cfg.dataset_size {
        return Err(PerfError::MinibatchExceedsDataset {
            k,
            m: cfg.dataset_size,
        });
    }
    Ok((cfg.epochs as u64 * cfg.dataset_size).div_ceil(k as u64))
}

/// `ceil(E*m/k) * (t_iter(k) + delta)`.
pub fn whole_training_time(
    phases: &[PhaseLayer],
    k: u32,
    model: &PerfModel,
    cfg: &TrainingConfig,
) -> Result<f64, PerfError> {
    let iters = iteration_count(cfg, k)?;
    Ok(iters as f64 * (iteration_time(phases, k, model)? + cfg.delta_sync))
}

/// Transfer time of an offload or prefetch; zero for pinned objects.
pub fn transfer_time(
    gmap: &Gmap,
    op: &MemOp,
    k: u32,
    model: &PerfModel,
    pins: &PinSet,
) -> Result<f64, PerfError> {
    if !matches!(op.kind, OpKind::Offload | OpKind::Prefetch) {
        return Err(PerfError::NotATransfer(op.kind));
    }
    if pins.contains(&op.object) {
        return Ok(0.0);
    }
    Ok(gmap.scaled_size(op.object, k)? as f64 / model.bandwidth_avail)
}
