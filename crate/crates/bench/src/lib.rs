//! Shared fixtures for the benchmarks.

use swapsched_core::synth::{default_truth, model_from_truth, resnet_like};
use swapsched_core::{build_gmap, peak_layerwise_memory, Gmap, HardwareSpec, PerfModel, PinSet};

pub struct Fixture {
    pub gmap: Gmap,
    pub hw: HardwareSpec,
    pub model: PerfModel,
}

/// ResNet-like network with a budget at `budget_factor` times the
/// layer-wise peak at the reference minibatch.
pub fn fixture(units: u32, bandwidth: f64, budget_factor: f64) -> Fixture {
    let spec = resnet_like(units, 32);
    let gmap = build_gmap(&spec).expect("synthetic spec builds");
    let model = model_from_truth(&default_truth(), 32, bandwidth, 0.95).expect("synthetic model");
    let others = 256 << 20;
    let peak = peak_layerwise_memory(&gmap, 32, &PinSet::new()).expect("peak").bytes;
    let budget = others + gmap.resident_bytes() + (peak as f64 * budget_factor) as u64;
    Fixture {
        hw: HardwareSpec::new(budget, others, 0.01, bandwidth),
        gmap,
        model,
    }
}
