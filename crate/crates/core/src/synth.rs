//! Synthetic networks, throughput curves and profiles for tests and demos.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::network::{LayerDecl, LayerType, NetworkSpec, PhaseLayer};
use crate::perf::{PerfError, PerfModel, ThroughputCurve};
use crate::profile::{scale_flop_count, ComputeSample, ProfileSet, TransferSample};

/// Saturating ground-truth throughput: `peak * f / (f + half)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthCurve {
    pub peak: f64,
    pub half: f64,
}

impl TruthCurve {
    pub fn rate(&self, flops: f64) -> f64 {
        self.peak * flops / (flops + self.half)
    }

    pub fn time(&self, flops: f64) -> f64 {
        flops / self.rate(flops)
    }
}

pub fn default_truth() -> BTreeMap<LayerType, TruthCurve> {
    BTreeMap::from([
        (LayerType::Conv, TruthCurve { peak: 6e12, half: 2e9 }),
        (LayerType::Bn, TruthCurve { peak: 4e11, half: 5e8 }),
        (LayerType::Activation, TruthCurve { peak: 3e11, half: 3e8 }),
        (LayerType::Pooling, TruthCurve { peak: 3e11, half: 3e8 }),
        (LayerType::Fc, TruthCurve { peak: 5e12, half: 1e9 }),
    ])
}

const KB: u64 = 1 << 10;

fn decl(index: u32, ty: LayerType, flops: u64, fm: u64, ws: u64, params: u64) -> LayerDecl {
    LayerDecl {
        index,
        layer_type: ty,
        flops_fwd_base: flops.max(1),
        flops_bwd_base: None,
        featuremap_bytes_base: fm,
        param_bytes: params,
        grad_bytes: params,
        workspace_bytes_base: ws,
    }
}

/// Conv-BN-activation units in four stages of shrinking spatial size, then
/// pooling and a classifier. `N = 3 * units + 2`.
pub fn resnet_like(units: u32, k_base: u32) -> NetworkSpec {
    let k = k_base as u64;
    let mut layers = Vec::new();
    let per_stage = units.div_ceil(4).max(1);
    let mut idx = 1;
    for u in 0..units {
        let stage = (u / per_stage).min(3) as u64;
        // bytes per sample halve each stage, channels double so FLOPs stay flat
        let elems = 56 * 56 * 64 >> stage;
        let fm = elems * 4 * k;
        let conv_flops = 2 * elems * 9 * (64 << stage) * k / 8;
        let params = 9 * (64 << stage) * (64 << stage) * 4 / 8;
        layers.push(decl(idx, LayerType::Conv, conv_flops, fm, fm / 2, params));
        layers.push(decl(idx + 1, LayerType::Bn, 8 * elems * k, fm, 0, 2 * (64 << stage) * 4));
        layers.push(decl(idx + 2, LayerType::Activation, elems * k, fm, 0, 0));
        idx += 3;
    }
    let last = 7 * 7 * 512;
    layers.push(decl(idx, LayerType::Pooling, 4 * last * k, 512 * 4 * k, 0, 0));
    layers.push(decl(idx + 1, LayerType::Fc, 2 * 512 * 1000 * k, 1000 * 4 * k, 0, 512 * 1000 * 4));
    NetworkSpec::new(format!("resnet-like-{units}"), k_base, 2.0, layers).expect("valid by construction")
}

/// Random mix of layer types with sizes in realistic ranges.
pub fn random_network<R: Rng + ?Sized>(rng: &mut R, n: u32, k_base: u32) -> NetworkSpec {
    let types = [
        LayerType::Conv,
        LayerType::Conv,
        LayerType::Bn,
        LayerType::Activation,
        LayerType::Pooling,
        LayerType::Fc,
    ];
    let k = k_base as u64;
    let layers = (1..=n)
        .map(|i| {
            let ty = types[rng.random_range(0..types.len())].clone();
            let fm = rng.random_range(16 * KB..2048 * KB) * k;
            let ws = if rng.random_bool(0.5) { rng.random_range(0..fm) } else { 0 };
            let flops = rng.random_range(1_000_000u64..500_000_000) * k;
            let params = rng.random_range(0..4096 * KB);
            decl(i, ty, flops, fm, ws, params)
        })
        .collect();
    NetworkSpec::new(format!("random-{n}"), k_base, 2.0, layers).expect("valid by construction")
}

/// Curves sampled from the truth at geometrically spaced FLOP counts, wide
/// enough that every realistic phase lands on the plateau side.
pub fn model_from_truth(
    truth: &BTreeMap<LayerType, TruthCurve>,
    k_base: u32,
    bandwidth: f64,
    efficiency: f64,
) -> Result<PerfModel, PerfError> {
    let curves = truth
        .iter()
        .map(|(ty, t)| {
            let knots = (-12..=12)
                .map(|i| {
                    let f = t.half * 2f64.powi(i);
                    (f, t.rate(f))
                })
                .collect();
            ThroughputCurve::from_knots(ty.clone(), knots, efficiency)
        })
        .collect::<Result<Vec<_>, _>>()?;
    PerfModel::new(k_base, bandwidth, curves)
}

/// Profiles of every phase at each minibatch in `ks`, with multiplicative
/// timing noise in `[1 - noise, 1 + noise]`.
pub fn synth_profiles<R: Rng + ?Sized>(
    phases: &[PhaseLayer],
    k_base: u32,
    truth: &BTreeMap<LayerType, TruthCurve>,
    ks: &[u32],
    bandwidth: f64,
    noise: f64,
    rng: &mut R,
) -> ProfileSet {
    let mut set = ProfileSet::default();
    let jitter = |rng: &mut R| {
        if noise > 0.0 {
            1.0 + rng.random_range(-noise..noise)
        } else {
            1.0
        }
    };
    for &k in ks {
        for p in phases {
            let Some(t) = truth.get(&p.layer_type) else {
                continue;
            };
            let flops = scale_flop_count(p.flops_base, k, k_base).expect("positive minibatch");
            set.push_compute(ComputeSample {
                minibatch: k,
                phase: p.phase,
                layer_type: p.layer_type.clone(),
                flops,
                time_s: t.time(flops as f64) * jitter(rng),
            });
        }
        for seq in 1..=4u32 {
            let bytes = (seq as u64) << 22;
            set.push_transfer(TransferSample {
                minibatch: k,
                seq_no: seq,
                bytes,
                time_s: bytes as f64 / bandwidth * jitter(rng),
            });
        }
    }
    set
}
