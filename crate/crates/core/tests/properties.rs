use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use swapsched_core::gmap::running_usage;
use swapsched_core::gmap::PinnedAccounting;
use swapsched_core::perf::isotonic_fit;
use swapsched_core::ready::{compute_t_ready_with, compute_times_ps};
use swapsched_core::synth::{default_truth, model_from_truth, random_network};
use swapsched_core::*;

fn net(seed: u64, n: u32) -> NetworkSpec {
    random_network(&mut ChaCha8Rng::seed_from_u64(seed), n, 8)
}

/// Isotonic fit by the max-min formula: the value at `i` is the largest,
/// over blocks starting at or before `i`, of the smallest block mean ending
/// at or after `i`.
fn isotonic_minmax(y: &[f64], w: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mean = |a: usize, b: usize| {
        let (s, t) = (a..=b).fold((0.0, 0.0), |(s, t), i| (s + w[i] * y[i], t + w[i]));
        s / t
    };
    (0..n)
        .map(|i| {
            (0..=i)
                .map(|a| (i..n).map(|b| mean(a, b)).fold(f64::INFINITY, f64::min))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gmap_is_valid_and_balanced(seed in any::<u64>(), n in 1u32..40) {
        let g = build_gmap(&net(seed, n)).unwrap();
        prop_assert!(validate_gmap(&g).is_empty());
        for k in [1, 7, 32] {
            let mut sum: i128 = 0;
            for op in g.ops() {
                sum += g.op_delta(op, k, &PinSet::new()).unwrap();
            }
            prop_assert_eq!(sum, 0);
        }
    }

    #[test]
    fn peak_monotone_in_k_and_pins(seed in any::<u64>(), n in 1u32..30, k in 1u32..64) {
        let g = build_gmap(&net(seed, n)).unwrap();
        let empty = PinSet::new();
        let p = peak_layerwise_memory(&g, k, &empty).unwrap().bytes;
        prop_assert!(peak_layerwise_memory(&g, k + 1, &empty).unwrap().bytes >= p);
        let mut pins = PinSet::new();
        let mut last = p;
        for o in g.featuremaps() {
            pins.insert(o.id);
            let now = peak_layerwise_memory(&g, k, &pins).unwrap().bytes;
            prop_assert!(now >= last);
            last = now;
        }
    }

    #[test]
    fn memory_check_matches_running_sum(seed in any::<u64>(), n in 1u32..20, k in 1u32..32) {
        let g = build_gmap(&net(seed, n)).unwrap();
        let usage = running_usage(&g, k, &PinSet::new(), PinnedAccounting::Lifetime).unwrap();
        let peak = *usage.iter().max().unwrap();
        prop_assert!(check_memory_constraint(&g, k, peak, &PinSet::new()).unwrap().ok);
        prop_assert!(!check_memory_constraint(&g, k, peak - 1, &PinSet::new()).unwrap().ok);
    }

    #[test]
    fn pav_matches_minmax(ys in prop::collection::vec(0.0f64..10.0, 1..25),
                          ws in prop::collection::vec(1.0f64..5.0, 25)) {
        let w = &ws[..ys.len()];
        let fast = isotonic_fit(&ys, w);
        let slow = isotonic_minmax(&ys, w);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-9, "{fast:?} vs {slow:?}");
        }
    }

    #[test]
    fn ready_times_monotone_in_bandwidth_and_pins(seed in any::<u64>(), n in 2u32..16, k in 1u32..24, bw in 1e9f64..2e10) {
        let g = build_gmap(&net(seed, n)).unwrap();
        let model = model_from_truth(&default_truth(), 8, bw, 0.95).unwrap();
        let compute = compute_times_ps(&g, k, &model).unwrap();
        let cap = peak_layerwise_memory(&g, k, &PinSet::new()).unwrap().bytes;
        let base = compute_t_ready_with(&g, k, cap, &PinSet::new(), bw, &compute).unwrap();
        let faster = compute_t_ready_with(&g, k, cap, &PinSet::new(), bw * 1.5, &compute).unwrap();
        for (a, b) in base.t_ready.iter().zip(&faster.t_ready) {
            prop_assert!(b <= a);
        }
        let mut pins = PinSet::new();
        let mut last = base.t_ready;
        for o in g.featuremaps() {
            pins.insert(o.id);
            let now = compute_t_ready_with(&g, k, cap, &pins, bw, &compute).unwrap().t_ready;
            for (a, b) in last.iter().zip(&now) {
                prop_assert!(b <= a);
            }
            last = now;
        }
    }
}
