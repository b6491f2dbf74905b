//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Set ACCEPTANCE_STRICT=1 to exit nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swapsched_core::lr::adapted_learning_rate;
use swapsched_core::perf::{fit_throughput_curve, isotonic_fit};
use swapsched_core::planner::k_max_from_terms;
use swapsched_core::profile::{scale_flop_count, ComputeSample};
use swapsched_core::ready::{compute_t_ready_with, schedule_swap_in, FreeCredit, SwapInOp};
use swapsched_core::synth::{default_truth, model_from_truth, random_network, resnet_like, TruthCurve};
use swapsched_core::*;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- 1

fn gmap_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..100 {
        let n = rng.random_range(1..=60);
        let k_base = rng.random_range(1..=64);
        let spec = random_network(&mut rng, n, k_base);
        let g = build_gmap(&spec).map_err(e)?;
        let diags = validate_gmap(&g);
        ensure(diags.is_empty(), || format!("case {case}: {:?}", diags[0]))?;
        let mut shapes = Vec::new();
        for k in [1, 7, 32] {
            let mut net: i128 = 0;
            let mut shape = Vec::new();
            for op in g.ops() {
                let d = g.op_delta(op, k, &PinSet::new()).map_err(e)?;
                net += d;
                shape.push((op.seq, op.phase, op.kind, op.object, d.signum()));
            }
            ensure(net == 0, || format!("case {case}: net delta {net} at k = {k}"))?;
            shapes.push(shape);
        }
        ensure(shapes.windows(2).all(|w| w[0] == w[1]), || {
            format!("case {case}: structure differs across k")
        })?;
    }
    Ok("100 networks".into())
}

// ---------------------------------------------------------------- 2

fn scaling_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..1000 {
        let size: u64 = rng.random_range(0..1u64 << 40);
        let k: u32 = rng.random_range(1..=4096);
        let k2: u32 = rng.random_range(1..=4096);
        let k_base: u32 = rng.random_range(1..=1024);
        let g: u64 = [1, 256, 512, 4096][rng.random_range(0..4)];

        let s = scale_bytes(size, true, k, k_base, g).map_err(e)?;
        let (s128, size128) = (s as u128, size as u128);
        // s is the least multiple of g with s * k_base >= size * k
        ensure(s % g == 0, || format!("case {case}: {s} not a multiple of {g}"))?;
        ensure(s128 * k_base as u128 >= size128 * k as u128, || format!("case {case}: {s} too small"))?;
        ensure(
            s == 0 || (s128 - g as u128) * (k_base as u128) < size128 * k as u128,
            || format!("case {case}: {s} not the least"),
        )?;
        // rounding-only departure from linearity
        let a = scale_bytes(size, true, k2, k_base, g).map_err(e)?;
        let both = scale_bytes(size, true, k + k2, k_base, g).map_err(e)?;
        ensure(both <= s + a && both + g >= s + a, || {
            format!("case {case}: s(k1+k2) = {both}, s(k1) + s(k2) = {}", s + a)
        })?;
        let fixed = scale_bytes(size, false, k, k_base, g).map_err(e)?;
        ensure(fixed == size.div_ceil(g) * g, || format!("case {case}: non-scaling size changed"))?;

        let flops = rng.random_range(1..1u64 << 40);
        let f = scale_flop_count(flops, k, k_base).map_err(e)?;
        // nearest integer to flops * k / k_base, halves rounded up
        let (num, den) = (flops as u128 * k as u128, k_base as u128);
        let twice = 2 * f as u128 * den;
        ensure(twice + den > 2 * num && twice <= 2 * num + den, || format!("case {case}: flops {f}"))?;

        // largest k with k * fm <= k_base * (budget - fixed)
        let fm = rng.random_range(1..1u64 << 34);
        let (others, para, ws) = (
            rng.random_range(0..1u64 << 30),
            rng.random_range(0..1u64 << 30),
            rng.random_range(0..1u64 << 30),
        );
        let budget = others + para + ws + rng.random_range(1..1u64 << 36);
        let km = k_max_from_terms(budget, others, para, ws, fm, k_base).map_err(e)? as u128;
        let room = k_base as u128 * (budget - others - para - ws) as u128;
        ensure(km * fm as u128 <= room && (km + 1) * fm as u128 > room, || {
            format!("case {case}: k_max {km}")
        })?;
    }
    Ok("1000 triples".into())
}

// ---------------------------------------------------------------- 3

fn isotonic_reference(y: &[f64], w: &[f64]) -> Vec<f64> {
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

fn curve_fit_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let m = rng.random_range(2..30);
        let mut flops: Vec<u64> = (0..m).map(|_| rng.random_range(1_000u64..10_000_000_000)).collect();
        flops.sort_unstable();
        flops.dedup();
        if flops.len() < 2 {
            continue;
        }
        let truth = TruthCurve {
            peak: rng.random_range(1e10..1e13),
            half: rng.random_range(1e5..1e9),
        };
        let noise = rng.random_range(0.0..0.4);
        let samples: Vec<ComputeSample> = flops
            .iter()
            .flat_map(|&f| {
                let reps = rng.random_range(1..4);
                (0..reps)
                    .map(|_| ComputeSample {
                        minibatch: 1,
                        phase: 1,
                        layer_type: LayerType::Conv,
                        flops: f,
                        time_s: truth.time(f as f64) * (1.0 + rng.random_range(-noise..=noise)),
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let eta = rng.random_range(0.5..=1.0);
        let c = fit_throughput_curve(LayerType::Conv, &samples, eta).map_err(e)?;

        ensure(c.knots.windows(2).all(|w| w[0].1 <= w[1].1), || format!("case {case}: knots decrease"))?;
        let (lo, hi) = (c.knots[0].0, c.knots.last().unwrap().0);
        let mut prev = 0.0;
        for i in 0..=400 {
            let f = lo / 4.0 * (hi * 16.0 / lo).powf(i as f64 / 400.0);
            let r = c.rate(f);
            ensure(r >= prev, || format!("case {case}: rate drops at {f}"))?;
            prev = r;
        }
        for f in [hi * 1.000001, hi * 10.0, hi * 1e6] {
            ensure(c.rate(f) == c.plateau * eta, || format!("case {case}: no plateau at {f}"))?;
        }

        // in-sample: fitted rate sits within the isotonic residual of the observed mean
        let mut by: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        for s in &samples {
            let v = by.entry(s.flops).or_insert((0.0, 0.0));
            v.0 += s.flops as f64 / s.time_s;
            v.1 += 1.0;
        }
        let ys: Vec<f64> = by.values().map(|(s, n)| s / n).collect();
        let ws: Vec<f64> = by.values().map(|(_, n)| *n).collect();
        let iso = isotonic_reference(&ys, &ws);
        for ((&f, y), iso) in by.keys().zip(&ys).zip(&iso) {
            let fitted = c.rate(f as f64) / eta;
            ensure((fitted - iso).abs() <= 1e-9 * iso, || format!("case {case}: {fitted} vs {iso}"))?;
            ensure((fitted - y).abs() <= (iso - y).abs() * (1.0 + 1e-9) + 1e-9 * y, || {
                format!("case {case}: residual beyond isotonic")
            })?;
        }

        // PAV against the quadratic-time reference on the raw sample set
        let raw: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(-5.0..5.0)).collect();
        let wr: Vec<f64> = raw.iter().map(|_| rng.random_range(0.1..3.0)).collect();
        let fast = isotonic_fit(&raw, &wr);
        let slow = isotonic_reference(&raw, &wr);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-9, || format!("PAV differs from reference by {worst:e}"))?;
    Ok(format!("200 sets, PAV max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn whole_time_monotone() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // half-saturation far below any phase's FLOPs: every phase runs on the plateau
    let truth: BTreeMap<LayerType, TruthCurve> = default_truth()
        .into_iter()
        .map(|(t, c)| (t, TruthCurve { peak: c.peak, half: c.half * 1e-4 }))
        .collect();
    let mut checked = 0;
    for case in 0..20 {
        let n = rng.random_range(2..40);
        let spec = random_network(&mut rng, n, 8);
        let model = model_from_truth(&truth, 8, 1e10, 0.95).map_err(e)?;
        let phases = unfold_network(&spec);
        let cfg = TrainingConfig {
            epochs: 90,
            dataset_size: 1_281_167,
            delta_sync: rng.random_range(1e-3..2e-2),
        };
        let step = rng.random_range(1..=8u32);
        let mut last = f64::INFINITY;
        for i in 1..=50u32 {
            let k = i * step;
            let t = whole_training_time(&phases, k, &model, &cfg).map_err(e)?;
            ensure(t <= last, || format!("case {case}: T({k}) = {t} > T({}) = {last}", k - step))?;
            last = t;
            checked += 1;
        }
    }
    Ok(format!("{checked} grid points"))
}

// ---------------------------------------------------------------- 5, 6

struct Instance {
    gmap: Gmap,
    hw: HardwareSpec,
    model: PerfModel,
    budget: u64,
}

impl Instance {
    fn ctx(&self) -> PlanContext<'_> {
        PlanContext {
            gmap: &self.gmap,
            hw: &self.hw,
            model: &self.model,
            budget: self.budget,
            training: TrainingConfig {
                epochs: 90,
                dataset_size: 1_281_167,
                delta_sync: self.hw.delta_sync,
            },
        }
    }

    fn fixed(&self) -> u64 {
        self.hw.m_others + self.gmap.resident_bytes()
    }

    fn dynamic(&self, k: u32, pins: &PinSet, cap: u64) -> Result<SimSummary, String> {
        let cfg = SimConfig::new(self.budget, self.fixed(), SimMode::Dynamic, self.model.bandwidth_avail)
            .with_active_area(cap);
        Ok(simulate_iteration(&self.gmap, k, pins, &self.model, &cfg).map_err(e)?.summary)
    }
}

fn spec_for(rng: &mut ChaCha8Rng, max_layers: u32) -> NetworkSpec {
    let n = rng.random_range(2..=max_layers);
    if rng.random_bool(0.5) {
        random_network(rng, n, 8)
    } else {
        resnet_like((n / 3).max(1), 8)
    }
}

fn instance(rng: &mut ChaCha8Rng) -> Result<Instance, String> {
    let spec = spec_for(rng, 40);
    let gmap = build_gmap(&spec).map_err(e)?;
    let bw = rng.random_range(2e9..2e10);
    let model = model_from_truth(&default_truth(), 8, bw, 0.95).map_err(e)?;
    let others = rng.random_range(0..1u64 << 26);
    let fixed = others + gmap.resident_bytes();
    let none = PinSet::new();
    let fm1: u64 = gmap.featuremaps().map(|o| gmap.scaled_size(o.id, 1).unwrap()).sum();
    let floor = fixed + peak_layerwise_memory(&gmap, 1, &none).map_err(e)?.bytes + fm1;
    let peak8 = peak_layerwise_memory(&gmap, 8, &none).map_err(e)?.bytes;
    let budget = floor.max(fixed + (peak8 as f64 * rng.random_range(1.0..6.0)) as u64);
    Ok(Instance {
        gmap,
        hw: HardwareSpec::new(budget, others, 0.01, bw),
        model,
        budget,
    })
}

fn planner_simulator_consistency() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut over_budget, mut stalled, mut unplanned) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i = instance(&mut rng)?;
        let PlanOutcome::Planned(plan) =
            find_efficiency_optimal_minibatch(&i.ctx(), SearchOptions::default()).map_err(e)?
        else {
            unplanned += 1;
            continue;
        };
        let s = i.dynamic(plan.k_star, &plan.pins(), plan.active_area_bytes)?;
        if s.oom || s.peak_mem_bytes > i.budget {
            over_budget += 1;
            continue;
        }
        let frac = s.total_stall() / s.iter_time();
        worst = worst.max(frac);
        if frac > 0.02 {
            stalled += 1;
        }
    }
    ensure(over_budget == 0 && stalled == 0 && unplanned == 0, || {
        format!("{over_budget} over budget, {stalled} over 2% stall, {unplanned} without a plan")
    })?;
    Ok(format!("50 instances, worst stall fraction {worst:.2e}"))
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut done = 0;
    let mut exact = 0;
    while done < 20 {
        let spec = spec_for(&mut rng, 20);
        let gmap = build_gmap(&spec).map_err(e)?;
        let bw = rng.random_range(2e9..2e10);
        let model = model_from_truth(&default_truth(), 8, bw, 0.95).map_err(e)?;
        let others = rng.random_range(0..1u64 << 24);
        let fixed = others + gmap.resident_bytes();
        let target = rng.random_range(8..=64);
        let budget = fixed + peak_layerwise_memory(&gmap, target, &PinSet::new()).map_err(e)?.bytes;
        let hw = HardwareSpec::new(budget, others, 0.01, bw);
        let k_max = swapsched_core::planner::max_trainable_minibatch(&gmap, budget, &hw).map_err(e)?;
        if k_max > 64 {
            continue;
        }
        let i = Instance { gmap, hw, model, budget };
        let ctx = i.ctx();

        let planned = match find_efficiency_optimal_minibatch(&ctx, SearchOptions::default()).map_err(e)? {
            PlanOutcome::Planned(p) => p.k_star,
            _ => 0,
        };
        // ground truth: every k under the same pins, judged by the simulator
        let mut oracle = 0;
        for k in 1..=k_max {
            let ev = evaluate_k(&ctx, k).map_err(e)?;
            let s = i.dynamic(k, &ev.pins, ev.active_area)?;
            if !s.oom && s.total_stall_ps == 0 && s.peak_mem_bytes <= budget {
                oracle = k;
            }
        }
        ensure(planned.abs_diff(oracle) <= 1, || {
            format!("instance {done}: linear search {planned}, exhaustive {oracle}")
        })?;
        if planned == oracle {
            exact += 1;
        }
        done += 1;
    }
    Ok(format!("20 instances, {exact} exact"))
}

// ---------------------------------------------------------------- 7

fn qualitative_scenario() -> Check {
    let spec = resnet_like(12, 32);
    let gmap = build_gmap(&spec).map_err(e)?;
    let bw = 1.2e10;
    let model = model_from_truth(&default_truth(), 32, bw, 0.95).map_err(e)?;
    let k = 64;
    let others = 256 << 20;
    let fixed = others + gmap.resident_bytes();
    let sim = |mode: SimMode, budget: u64, pins: &PinSet, cap: Option<u64>| -> Result<SimSummary, String> {
        let mut cfg = SimConfig::new(budget, fixed, mode, bw);
        if let Some(c) = cap {
            cfg = cfg.with_active_area(c);
        }
        Ok(simulate_iteration(&gmap, k, pins, &model, &cfg).map_err(e)?.summary)
    };
    let none = PinSet::new();
    let all: PinSet = gmap.featuremaps().map(|o| o.id).collect();

    let resident = sim(SimMode::Resident, u64::MAX / 4, &all, None)?;
    let footprint = resident.peak_mem_bytes;

    // smallest budget naive mode survives
    let (mut lo, mut hi) = (fixed, footprint);
    ensure(!sim(SimMode::Naive, hi, &none, None)?.oom, || "naive fails at the resident footprint".into())?;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if sim(SimMode::Naive, mid, &none, None)?.oom {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let naive = sim(SimMode::Naive, hi, &none, None)?;
    ensure(naive.total_stall_ps > 0, || "(a) naive at minimum budget does not stall".into())?;

    let hw = HardwareSpec::new(footprint, others, 0.01, bw);
    let mut found = None;
    // walk up from the naive minimum toward the resident footprint
    for step in 0..100u64 {
        let budget = hi + (footprint - hi) / 100 * step;
        let ctx = PlanContext {
            gmap: &gmap,
            hw: &hw,
            model: &model,
            budget,
            training: TrainingConfig { epochs: 90, dataset_size: 1_281_167, delta_sync: 0.01 },
        };
        let ev = evaluate_k(&ctx, k).map_err(e)?;
        if !ev.feasible {
            continue;
        }
        let d = sim(SimMode::Dynamic, budget, &ev.pins, Some(ev.active_area))?;
        if !d.oom && d.iter_time() <= 1.05 * resident.iter_time() {
            found = Some((budget, d));
            break;
        }
    }
    let (budget, dynamic) = found.ok_or("(b) no dynamic budget below the resident footprint within 5%")?;
    ensure(budget < footprint, || "(c) dynamic budget not below resident footprint".into())?;
    Ok(format!(
        "naive stall {:.2} ms at {} MiB; dynamic {:.3} ms vs resident {:.3} ms at {} MiB < {} MiB",
        naive.total_stall() * 1e3,
        hi >> 20,
        dynamic.iter_time() * 1e3,
        resident.iter_time() * 1e3,
        budget >> 20,
        footprint >> 20
    ))
}

// ---------------------------------------------------------------- 8

fn hand_traces() -> Check {
    const MS: Ps = 1_000_000_000;
    let op = |phase, bytes, ms: u64| SwapInOp {
        phase,
        bytes,
        transfer: ms * MS,
        not_before: 0,
    };
    let unblocked = schedule_swap_in(2, &[op(1, 10, 5), op(2, 10, 3)], &[], 1000).map_err(e)?;
    ensure(unblocked.t_ready == [5 * MS, 8 * MS], || format!("unblocked {:?}", unblocked.t_ready))?;

    let pinned = schedule_swap_in(3, &[op(1, 0, 0), op(2, 0, 0), op(3, 0, 0)], &[], 0).map_err(e)?;
    ensure(pinned.t_ready == [0, 0, 0], || format!("all pinned {:?}", pinned.t_ready))?;

    // phase 3 needs 50 of a 100-byte area holding 90; phase 1's release at 4 ms frees it
    let credits = [
        FreeCredit { phase: 1, time: 4 * MS, bytes: 60 },
        FreeCredit { phase: 2, time: 8 * MS, bytes: 30 },
    ];
    let blocked = schedule_swap_in(3, &[op(1, 60, 0), op(2, 30, 0), op(3, 50, 2)], &credits, 100).map_err(e)?;
    ensure(blocked.t_ready == [0, 0, 6 * MS], || format!("blocked {:?}", blocked.t_ready))?;
    ensure(blocked.memory_blocked == [false, false, true], || "blocked flag".into())?;

    // the same all-pinned case through a real map
    let spec = resnet_like(2, 4);
    let g = build_gmap(&spec).map_err(e)?;
    let all: PinSet = g.featuremaps().map(|o| o.id).collect();
    let cap = peak_layerwise_memory(&g, 4, &PinSet::new()).map_err(e)?.bytes;
    let s = compute_t_ready_with(&g, 4, cap, &all, 1e9, &vec![MS; g.num_phases()]).map_err(e)?;
    ensure(s.t_ready.iter().all(|&t| t == 0), || "pinned map not all zero".into())?;
    Ok("3 fixtures exact".into())
}

// ---------------------------------------------------------------- 9

fn learning_rate() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for _ in 0..100 {
        let a = rng.random_range(1e-4..1.0);
        let c = rng.random_range(1e-3..0.99) / a;
        let cfg = LrConfig::new(a, c, 1000, 1.0);
        ensure(adapted_learning_rate(&cfg).map_err(e)? == a, || format!("q = 1 changes {a}"))?;
    }
    let mut worst_identity: f64 = 0.0;
    for _ in 0..1000 {
        let ac = rng.random_range(1e-6..0.9);
        let c = rng.random_range(0.01..100.0);
        let q = rng.random_range(1..=16) as f64;
        let cfg = LrConfig::new(ac / c, c, 1000, q);
        let alpha = adapted_learning_rate(&cfg).map_err(e)?;
        let lhs = 1.0 - alpha * c;
        let rhs = (1.0 - ac).powi(q as i32);
        worst_identity = worst_identity.max((lhs - rhs).abs());
    }
    ensure(worst_identity < 1e-14, || format!("identity off by {worst_identity:e}"))?;

    // residual bound over the stated region: random draws plus a dense grid in a*c
    let mut worst = (0.0f64, 0.0, 0u64, 0.0);
    let mut probe = |ac: f64, iters: u64, q: f64| -> Result<(), String> {
        let cfg = LrConfig::new(ac, 1.0, iters, q);
        let alpha = adapted_learning_rate(&cfg).map_err(e)?;
        let r = contraction_residual(&cfg, alpha).map_err(e)?.abs();
        if r > worst.0 {
            worst = (r, ac, iters, q);
        }
        Ok(())
    };
    for _ in 0..1000 {
        let iters = rng.random_range(1000..=100_000);
        let ac = rng.random_range(1e-6..=0.3);
        let q = rng.random_range(1.0..=8.0);
        probe(ac, iters, q)?;
    }
    for i in 0..=3000 {
        let ac = 1e-6 * (0.3f64 / 1e-6).powf(i as f64 / 3000.0);
        for q in [2.0, 4.0, 8.0] {
            probe(ac, 1000, q)?;
        }
    }
    let (r, ac, iters, q) = worst;
    ensure(r < 1e-3, || {
        format!("residual {r:.3e} at alpha_base*c = {ac:.3e}, iters_base = {iters}, q = {q}")
    })?;
    Ok(format!("identity within {worst_identity:.1e}, residual max {r:.2e}"))
}

// ---------------------------------------------------------------- 10

fn run_cli(dir: &Path, args: &[&str]) -> Result<(i32, Vec<u8>), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_swapsched"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(e)?;
    let code = out.status.code().ok_or("killed by signal")?;
    if code != 0 && code != 1 {
        return Err(format!("{args:?} exited {code}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok((code, out.stdout))
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(e)? {
        let p = entry.map_err(e)?.path();
        files.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).map_err(e)?);
    }
    Ok(files)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(e)?;
    let d = tmp.path();
    let (code, _) = run_cli(d, &["synth", "--seed", "7", "--units", "6", "--k-base", "16", "--bandwidth", "6e9", "--out-dir", "fx"])?;
    ensure(code == 0, || "synth failed".into())?;
    let base = [
        "--network", "fx/network.json", "--hardware", "fx/hardware.json", "--model", "fit/model.json",
    ];
    let with = |cmd: &'static str, rest: &[&'static str]| -> Vec<&'static str> {
        let mut v = vec![cmd];
        v.extend_from_slice(&base);
        v.extend_from_slice(rest);
        v
    };
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("synth", vec!["synth", "--seed", "7", "--units", "6", "--k-base", "16", "--bandwidth", "6e9", "--out-dir", "synth"]),
        ("validate", vec!["validate", "--network", "fx/network.json", "--hardware", "fx/hardware.json",
                          "--profiles", "fx/compute.csv,fx/transfer.csv", "--out-dir", "validate"]),
        ("fit", vec!["fit", "--network", "fx/network.json", "--hardware", "fx/hardware.json",
                     "--profiles", "fx/compute.csv,fx/transfer.csv", "--out-dir", "fit"]),
        ("plan", with("plan", &["--out-dir", "plan"])),
        ("plan-parallel", with("plan", &["--parallel", "--out-dir", "plan-par"])),
        ("plan-step", with("plan", &["--step", "4", "--out-dir", "plan-step"])),
        ("plan-step-parallel", with("plan", &["--step", "4", "--parallel", "--out-dir", "plan-step-par"])),
        ("simulate", with("simulate", &["--plan", "plan/plan.json", "--out-dir", "sim"])),
        ("simulate-naive", with("simulate", &["--mode", "naive", "--k", "32", "--out-dir", "sim-naive"])),
        ("report", vec!["report", "--summary", "sim/summary.json", "--trace", "sim/trace.csv", "--out-dir", "report"]),
        ("tune-lr", vec!["tune-lr", "--alpha-base", "0.05", "--c", "2", "--iters-base", "5000",
                         "--k-star", "48", "--k-base", "16", "--out-dir", "lr"]),
        ("sweep", with("sweep", &["--k", "8,16,24,32,48,64", "--out-dir", "sweep"])),
        ("sweep-parallel", with("sweep", &["--k", "8,16,24,32,48,64", "--parallel", "--out-dir", "sweep-par"])),
        ("pipeline", vec!["pipeline", "--network", "fx/network.json", "--hardware", "fx/hardware.json",
                          "--profiles", "fx/compute.csv,fx/transfer.csv", "--out-dir", "pipe"]),
    ];
    for (name, args) in &runs {
        let out_dir = d.join(args.last().unwrap());
        let first = run_cli(d, args)?;
        let files = snapshot(&out_dir)?;
        fs::remove_dir_all(&out_dir).map_err(e)?;
        let second = run_cli(d, args)?;
        ensure(first == second, || format!("{name}: stdout or exit code differs"))?;
        let again = snapshot(&out_dir)?;
        ensure(files == again, || {
            let diff: Vec<&String> = files.keys().filter(|k| files.get(*k) != again.get(*k)).collect();
            format!("{name}: outputs differ: {diff:?}")
        })?;
    }
    let seq = fs::read(d.join("sweep/sweep.csv")).map_err(e)?;
    let par = fs::read(d.join("sweep-par/sweep.csv")).map_err(e)?;
    ensure(seq == par, || "parallel sweep differs from sequential".into())?;
    let plan = |dir: &str| -> Result<serde_json::Value, String> {
        let mut v: serde_json::Value =
            serde_json::from_slice(&fs::read(d.join(dir).join("plan.json")).map_err(e)?).map_err(e)?;
        v.as_object_mut().map(|m| m.remove("manifest_digest"));
        Ok(v)
    };
    ensure(plan("plan")? == plan("plan-par")?, || "parallel plan differs".into())?;
    ensure(plan("plan-step")? == plan("plan-step-par")?, || "parallel coarse plan differs".into())?;
    Ok(format!("{} runs repeated byte for byte", runs.len()))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, u64, fn() -> Check); 10] = [
        (1, "GMAP invariant suite", 10, gmap_invariants),
        (2, "scaling exactness", 1, scaling_exactness),
        (3, "curve-fit properties", 5, curve_fit_properties),
        (4, "whole-training-time monotonicity", 5, whole_time_monotone),
        (5, "planner-simulator consistency", 60, planner_simulator_consistency),
        (6, "linear search against exhaustive oracle", 120, oracle_equivalence),
        (7, "naive, dynamic and resident scenario", 10, qualitative_scenario),
        (8, "data-ready hand traces", 1, hand_traces),
        (9, "learning-rate suite", 1, learning_rate),
        (10, "determinism", 30, determinism),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let within = took <= Duration::from_secs(limit);
        let (verdict, detail) = match (&result, within) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d}; over the {limit} s limit")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("criterion {id:>2} {verdict} [{:.2} s / {limit} s] {name}: {detail}", took.as_secs_f64());
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
