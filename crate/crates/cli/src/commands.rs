use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use swapsched_core::lr::adapted_learning_rate_with_mu;
use swapsched_core::perf::iteration_count;
use swapsched_core::planner::{fixed_overhead, KEvaluation};
use swapsched_core::profile::{write_compute_csv, write_transfer_csv, LoadOptions};
use swapsched_core::sim::{write_memory_csv, write_stall_csv, write_trace_csv};
use swapsched_core::synth;
use swapsched_core::*;

use crate::manifest::{Outputs, RunManifest};
use crate::{
    FitArgs, Inputs, PipelineArgs, PlanArgs, ReportArgs, SimulateArgs, SweepArgs, SynthArgs,
    Training, TuneLrArgs, ValidateArgs,
};

/// A condition that only a bug in this tool can produce.
#[derive(Debug)]
pub struct InternalError(pub String);

impl std::fmt::Display for InternalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "internal error: {}", self.0)
    }
}

impl std::error::Error for InternalError {}

const OK: u8 = 0;
const FAIL: u8 = 1;

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| anyhow!("--{flag} is required"))
}

fn read_network(path: &Path) -> Result<NetworkSpec> {
    Ok(parse_network_spec(path)?)
}

fn read_hardware(path: &Path) -> Result<HardwareSpec> {
    Ok(parse_hardware_spec(path)?)
}

fn read_profiles(paths: &[PathBuf]) -> Result<ProfileSet> {
    let (set, diags) = load_profiles(paths, LoadOptions::default())?;
    for d in &diags {
        log::warn!("skipped {d}");
    }
    Ok(set)
}

fn training(t: &Training, hw: &HardwareSpec) -> TrainingConfig {
    TrainingConfig {
        epochs: t.epochs,
        dataset_size: t.dataset_size,
        delta_sync: hw.delta_sync,
    }
}

fn record_training(m: &mut RunManifest, t: &Training) {
    m.param("epochs", t.epochs);
    m.param("dataset_size", t.dataset_size);
}

/// Everything planning and simulation need.
struct Loaded {
    spec: NetworkSpec,
    gmap: Gmap,
    hw: HardwareSpec,
    model: PerfModel,
}

impl Loaded {
    fn ctx<'a>(&'a self, budget: u64, training: TrainingConfig) -> PlanContext<'a> {
        PlanContext {
            gmap: &self.gmap,
            hw: &self.hw,
            model: &self.model,
            budget,
            training,
        }
    }

    fn fixed(&self) -> u64 {
        fixed_overhead(&self.gmap, &self.hw)
    }
}

/// Reads network, hardware and a model (loaded or fitted), recording each
/// input in the manifest.
fn load_inputs(inputs: &Inputs, efficiency: f64, m: &mut RunManifest) -> Result<Loaded> {
    let net_path = require(&inputs.network, "network")?;
    let hw_path = require(&inputs.hardware, "hardware")?;
    m.input("network", net_path)?;
    m.input("hardware", hw_path)?;
    let spec = read_network(net_path)?;
    let hw = read_hardware(hw_path)?;
    let gmap = build_gmap(&spec)?;
    let model = match &inputs.model {
        Some(p) => {
            m.input("model", p)?;
            PerfModel::load(p)?
        }
        None if !inputs.profiles.is_empty() => {
            for p in &inputs.profiles {
                m.input("profiles", p)?;
            }
            m.param("efficiency", efficiency);
            let set = read_profiles(&inputs.profiles)?;
            PerfModel::fit(&set, spec.k_base, efficiency, hw.pcie_nominal)?
        }
        None => bail!("either --model or --profiles is required"),
    };
    if model.k_base != spec.k_base {
        bail!(
            "model was fitted for k_base {} but the network declares {}",
            model.k_base,
            spec.k_base
        );
    }
    model.check_covers(&spec)?;
    Ok(Loaded { spec, gmap, hw, model })
}

#[derive(Serialize)]
struct ValidateReport {
    ok: bool,
    gmap_diagnostics: Vec<Diagnostic>,
    profile_diagnostics: Vec<swapsched_core::profile::RowDiagnostic>,
}

pub fn validate(a: ValidateArgs) -> Result<u8> {
    let mut m = RunManifest::new("validate");
    m.opt_input("network", a.inputs.network.as_deref())?;
    m.opt_input("hardware", a.inputs.hardware.as_deref())?;
    m.opt_input("gmap", a.gmap.as_deref())?;
    m.opt_input("model", a.inputs.model.as_deref())?;
    for p in &a.inputs.profiles {
        m.input("profiles", p)?;
    }

    let spec = a.inputs.network.as_deref().map(read_network).transpose()?;
    if let Some(p) = &a.inputs.hardware {
        read_hardware(p)?;
    }
    let gmap = match (&a.gmap, &spec) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(Gmap::from_json(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        (None, Some(s)) => Some(build_gmap(s)?),
        (None, None) => None,
    };
    let gmap_diagnostics = gmap.as_ref().map(validate_gmap).unwrap_or_default();
    if let (Some(p), Some(s)) = (&a.inputs.model, &spec) {
        PerfModel::load(p)?.check_covers(s)?;
    }
    let profile_diagnostics = if a.inputs.profiles.is_empty() {
        Vec::new()
    } else {
        load_profiles(&a.inputs.profiles, LoadOptions::default())?.1
    };

    let report = ValidateReport {
        ok: gmap_diagnostics.is_empty() && profile_diagnostics.is_empty(),
        gmap_diagnostics,
        profile_diagnostics,
    };
    for d in &report.gmap_diagnostics {
        println!("gmap: {d}");
    }
    for d in &report.profile_diagnostics {
        println!("profile: {d}");
    }
    if let Some(dir) = &a.out_dir {
        let mut out = Outputs::create(dir, &mut m)?;
        out.write_json("validate.json", &report)?;
        if let Some(g) = &gmap {
            out.write_bytes("gmap.json", format!("{}\n", g.to_json()).as_bytes())?;
        }
        out.finish(&m)?;
    }
    if report.ok {
        println!("ok");
        Ok(OK)
    } else {
        Ok(FAIL)
    }
}

fn model_table(model: &PerfModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "bandwidth_avail {:.6e} B/s", model.bandwidth_avail);
    for c in model.curves.values() {
        let _ = writeln!(
            s,
            "{} (efficiency {}, plateau {:.6e} FLOP/s)",
            c.layer_type.as_str(),
            c.efficiency,
            c.plateau
        );
        for (f, r) in &c.knots {
            let _ = writeln!(s, "  {f:>14.6e} FLOPs  {r:>14.6e} FLOP/s");
        }
    }
    s
}

fn write_model(out: &mut Outputs, model: &PerfModel) -> Result<()> {
    let doc: serde_json::Value = serde_json::from_str(&model.to_json())?;
    out.write_json("model.json", &doc)?;
    Ok(())
}

pub fn fit(a: FitArgs) -> Result<u8> {
    let mut m = RunManifest::new("fit");
    if a.inputs.profiles.is_empty() {
        bail!("--profiles is required");
    }
    for p in &a.inputs.profiles {
        m.input("profiles", p)?;
    }
    m.opt_input("network", a.inputs.network.as_deref())?;
    m.opt_input("hardware", a.inputs.hardware.as_deref())?;
    m.param("efficiency", a.efficiency);
    let spec = a.inputs.network.as_deref().map(read_network).transpose()?;
    let hw = a.inputs.hardware.as_deref().map(read_hardware).transpose()?;
    let k_base = a
        .k_base
        .or(spec.as_ref().map(|s| s.k_base))
        .ok_or_else(|| anyhow!("--k-base or --network is required"))?;
    m.param("k_base", k_base);
    let fallback = hw.map(|h| h.pcie_nominal).unwrap_or(0.0);

    let set = read_profiles(&a.inputs.profiles)?;
    let model = PerfModel::fit(&set, k_base, a.efficiency, fallback)?;
    if let Some(s) = &spec {
        model.check_covers(s)?;
    }
    let mut out = Outputs::create(&a.out_dir, &mut m)?;
    write_model(&mut out, &model)?;
    out.finish(&m)?;
    print!("{}", model_table(&model));
    Ok(OK)
}

fn plan_text(outcome: &PlanOutcome, gmap: &Gmap) -> Result<String> {
    let mut s = String::new();
    match outcome {
        PlanOutcome::Planned(p) => {
            let _ = writeln!(s, "k* = {} (k_max = {})", p.k_star, p.k_max);
            let _ = writeln!(
                s,
                "pinned {} objects, {} bytes, {:.2}% of featuremap bytes",
                p.pinned.len(),
                p.pinned_bytes,
                100.0 * p.pinned_fraction(gmap)?
            );
            for o in &p.pinned {
                let _ = writeln!(s, "  {} {} bytes", o.id, o.bytes);
            }
            let _ = writeln!(s, "predicted iteration {:.6} s", p.predicted_iter_time_s);
            let _ = writeln!(
                s,
                "predicted training {:.1} s over {} iterations",
                p.predicted_whole_time_s, p.iterations
            );
        }
        PlanOutcome::Untrainable {
            budget_bytes,
            required_bytes,
        } => {
            let _ = writeln!(
                s,
                "untrainable: budget {budget_bytes} bytes is below the {required_bytes} bytes needed at k = 1"
            );
        }
        PlanOutcome::Infeasible { k_max } => {
            let _ = writeln!(
                s,
                "infeasible: every k up to {k_max} fits in memory but stalls even with all candidates pinned"
            );
        }
    }
    Ok(s)
}

fn run_plan(
    l: &Loaded,
    budget: u64,
    training: TrainingConfig,
    opts: SearchOptions,
) -> Result<PlanOutcome> {
    Ok(find_efficiency_optimal_minibatch(&l.ctx(budget, training), opts)?)
}

pub fn plan(a: PlanArgs) -> Result<u8> {
    let mut m = RunManifest::new("plan");
    let l = load_inputs(&a.inputs, a.efficiency, &mut m)?;
    let budget = a.budget_bytes.unwrap_or(l.hw.m_budget);
    m.param("budget_bytes", budget);
    m.param("step", a.step);
    record_training(&mut m, &a.training);
    let opts = SearchOptions {
        step: a.step,
        parallel: a.parallel,
    };
    let outcome = run_plan(&l, budget, training(&a.training, &l.hw), opts)?;
    let mut out = Outputs::create(&a.out_dir, &mut m)?;
    out.write_json("plan.json", &outcome)?;
    out.finish(&m)?;
    print!("{}", plan_text(&outcome, &l.gmap)?);
    Ok(match outcome {
        PlanOutcome::Planned(_) => OK,
        _ => FAIL,
    })
}

fn read_plan(path: &Path) -> Result<SwapPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let outcome: PlanOutcome =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    match outcome {
        PlanOutcome::Planned(p) => Ok(*p),
        other => bail!("{} holds no plan: {}", path.display(), plan_kind(&other)),
    }
}

fn plan_kind(o: &PlanOutcome) -> &'static str {
    match o {
        PlanOutcome::Planned(_) => "planned",
        PlanOutcome::Untrainable { .. } => "untrainable",
        PlanOutcome::Infeasible { .. } => "infeasible",
    }
}

fn all_featuremaps(gmap: &Gmap) -> PinSet {
    gmap.featuremaps().map(|o| o.id).collect()
}

/// Runs `mode` at `k`; dynamic mode takes its pins and cap from `plan`.
fn run_sim(
    l: &Loaded,
    mode: SimMode,
    k: u32,
    budget: u64,
    plan: Option<(&PinSet, u64)>,
) -> Result<SimResult> {
    let cfg = SimConfig::new(budget, l.fixed(), mode, l.model.bandwidth_avail);
    let (pins, cfg) = match mode {
        SimMode::Naive => (PinSet::new(), cfg),
        SimMode::Resident => (all_featuremaps(&l.gmap), cfg),
        SimMode::Dynamic => {
            let (pins, cap) = plan.ok_or_else(|| anyhow!("dynamic mode needs a plan"))?;
            (pins.clone(), cfg.with_active_area(cap))
        }
    };
    Ok(simulate_iteration(&l.gmap, k, &pins, &l.model, &cfg)?)
}

fn write_sim(out: &mut Outputs, r: &SimResult) -> Result<()> {
    let mut trace = Vec::new();
    write_trace_csv(&mut trace, &r.events)?;
    out.write_bytes("trace.csv", &trace)?;
    out.write_json("summary.json", &r.summary)?;
    let mut mem = Vec::new();
    write_memory_csv(&mut mem, &r.summary)?;
    out.write_bytes("memory.csv", &mem)?;
    if !r.summary.oom {
        let mut stall = Vec::new();
        write_stall_csv(&mut stall, &r.summary)?;
        out.write_bytes("stall.csv", &stall)?;
    }
    Ok(())
}

fn sim_text(s: &SimSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "mode {} k {}", s.mode, s.k);
    if s.oom {
        let _ = writeln!(t, "out of memory");
        if let Some(w) = &s.wait_graph {
            let _ = writeln!(
                t,
                "  blocked on {} (phase {}): needs {} bytes, {} available",
                w.blocked_op, w.blocked_phase, w.need_bytes, w.available_bytes
            );
            for (id, until) in &w.holders {
                let _ = writeln!(t, "  held by {id} until phase {until}");
            }
        }
        return t;
    }
    let _ = writeln!(t, "iteration {:.6} s, stall {:.6} s", s.iter_time(), s.total_stall());
    let _ = writeln!(t, "peak memory {} of {} bytes", s.peak_mem_bytes, s.budget_bytes);
    t
}

pub fn simulate(a: SimulateArgs) -> Result<u8> {
    let mut m = RunManifest::new("simulate");
    m.opt_input("plan", a.plan.as_deref())?;
    let l = load_inputs(&a.inputs, a.efficiency, &mut m)?;
    let plan = a.plan.as_deref().map(read_plan).transpose()?;
    let mode = match (a.mode, &plan) {
        (Some(mode), _) => mode,
        (None, Some(_)) => SimMode::Dynamic,
        (None, None) => bail!("--mode or --plan is required"),
    };
    let budget = a
        .budget_bytes
        .or(plan.as_ref().map(|p| p.budget_bytes))
        .unwrap_or(l.hw.m_budget);
    let k = match (a.k, &plan) {
        (Some(k), Some(p)) if k != p.k_star => {
            bail!("--k {k} disagrees with the plan's k* = {}", p.k_star)
        }
        (Some(k), _) => k,
        (None, Some(p)) => p.k_star,
        (None, None) => bail!("--k or --plan is required"),
    };
    m.param("mode", mode);
    m.param("k", k);
    m.param("budget_bytes", budget);
    m.param("tolerance", a.tolerance);
    record_training(&mut m, &a.training);

    // without a plan, dynamic mode pins what the planner would at this k
    let eval: Option<KEvaluation> = match (mode, &plan) {
        (SimMode::Dynamic, None) => Some(evaluate_k(&l.ctx(budget, training(&a.training, &l.hw)), k)?),
        _ => None,
    };
    let pins_cap = match (&plan, &eval) {
        (Some(p), _) => Some((p.pins(), p.active_area_bytes)),
        (None, Some(e)) => Some((e.pins.clone(), e.active_area)),
        _ => None,
    };
    let r = run_sim(&l, mode, k, budget, pins_cap.as_ref().map(|(p, c)| (p, *c)))?;

    let mut out = Outputs::create(&a.out_dir, &mut m)?;
    write_sim(&mut out, &r)?;
    print!("{}", sim_text(&r.summary));
    let mut code = if r.summary.oom { FAIL } else { OK };
    if let (Some(p), SimMode::Dynamic) = (&plan, mode) {
        let v = verify_plan(p, &r.summary, a.tolerance)?;
        println!(
            "verify: {} (stall fraction {:.4}, tolerance {})",
            if v.pass { "pass" } else { "fail" },
            v.stall_fraction,
            v.tolerance
        );
        out.write_json("verdict.json", &v)?;
        if !v.pass {
            code = FAIL;
        }
    }
    out.finish(&m)?;
    Ok(code)
}

#[derive(Serialize)]
struct LrReport {
    alpha_base: f64,
    c: f64,
    mu: f64,
    q: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_star: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_base: Option<u32>,
    alpha_star: f64,
    residual: f64,
    iters_base: u64,
    iters_adjusted: u64,
}

pub fn tune_lr(a: TuneLrArgs) -> Result<u8> {
    let mut m = RunManifest::new("tune-lr");
    m.opt_input("plan", a.plan.as_deref())?;
    for (key, v) in [("alpha_base", a.alpha_base), ("c", a.c), ("mu", a.mu)] {
        m.param(key, v);
    }
    m.param("iters_base", a.iters_base);

    let (cfg, k_star, k_base, iters_adjusted) = match a.q {
        Some(q) => {
            m.param("q", q);
            let cfg = LrConfig::new(a.alpha_base, a.c, a.iters_base, q).with_mu(a.mu);
            let iters = (a.iters_base as f64 / q).ceil() as u64;
            (cfg, None, None, iters)
        }
        None => {
            let plan = a.plan.as_deref().map(read_plan).transpose()?;
            let k_star = a
                .k_star
                .or(plan.as_ref().map(|p| p.k_star))
                .ok_or_else(|| anyhow!("--q, --k-star or --plan is required"))?;
            let k_base = a
                .k_base
                .or(plan.as_ref().map(|p| p.k_base))
                .ok_or_else(|| anyhow!("--q, --k-base or --plan is required"))?;
            if k_star == 0 || k_base == 0 {
                bail!("minibatch sizes must be positive");
            }
            m.param("k_star", k_star);
            m.param("k_base", k_base);
            let cfg = LrConfig::from_minibatch(a.alpha_base, a.c, a.iters_base, k_star, k_base).with_mu(a.mu);
            (cfg, Some(k_star), Some(k_base), adjust_iterations(k_star, k_base, a.iters_base))
        }
    };
    let alpha_star = adapted_learning_rate_with_mu(&cfg)?;
    let residual = contraction_residual(&cfg, alpha_star)?;
    let report = LrReport {
        alpha_base: a.alpha_base,
        c: a.c,
        mu: a.mu,
        q: cfg.q,
        k_star,
        k_base,
        alpha_star,
        residual,
        iters_base: a.iters_base,
        iters_adjusted,
    };
    let mut out = Outputs::create(&a.out_dir, &mut m)?;
    out.write_json("lr.json", &report)?;
    out.finish(&m)?;
    println!("alpha* = {alpha_star}");
    println!("residual = {residual:e}");
    println!("iterations {} -> {}", a.iters_base, report.iters_adjusted);
    Ok(OK)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SweepRow {
    k: u32,
    mode: SimMode,
    feasible: bool,
    iter_time: Option<f64>,
    whole_time: Option<f64>,
    peak_mem: Option<u64>,
    stall: Option<f64>,
}

fn sweep_cell(l: &Loaded, budget: u64, training: TrainingConfig, k: u32, mode: SimMode) -> Result<SweepRow> {
    let blank = SweepRow {
        k,
        mode,
        feasible: false,
        iter_time: None,
        whole_time: None,
        peak_mem: None,
        stall: None,
    };
    if k == 0 || k as u64 > training.dataset_size {
        return Ok(blank);
    }
    let r = if mode == SimMode::Dynamic {
        let e = evaluate_k(&l.ctx(budget, training), k)?;
        if !e.feasible {
            return Ok(blank);
        }
        run_sim(l, mode, k, budget, Some((&e.pins, e.active_area)))?
    } else {
        run_sim(l, mode, k, budget, None)?
    };
    let s = &r.summary;
    if s.oom {
        return Ok(blank);
    }
    let iter = s.iter_time();
    let iters = iteration_count(&training, k)?;
    Ok(SweepRow {
        feasible: true,
        iter_time: Some(iter),
        whole_time: Some(iters as f64 * (iter + training.delta_sync)),
        peak_mem: Some(s.peak_mem_bytes),
        stall: Some(s.total_stall()),
        ..blank
    })
}

pub fn sweep(a: SweepArgs) -> Result<u8> {
    if a.k.is_empty() {
        bail!("--k needs at least one minibatch size");
    }
    let mut m = RunManifest::new("sweep");
    let l = load_inputs(&a.inputs, a.efficiency, &mut m)?;
    let budget = a.budget_bytes.unwrap_or(l.hw.m_budget);
    let modes = if a.mode.is_empty() {
        SimMode::ALL.to_vec()
    } else {
        a.mode.clone()
    };
    m.param("budget_bytes", budget);
    m.param("k", a.k.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
    m.param("mode", modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","));
    record_training(&mut m, &a.training);
    let tc = training(&a.training, &l.hw);

    let cells: Vec<(u32, SimMode)> = a
        .k
        .iter()
        .flat_map(|&k| modes.iter().map(move |&mode| (k, mode)))
        .collect();
    let rows: Vec<SweepRow> = if a.parallel {
        cells
            .par_iter()
            .map(|&(k, mode)| sweep_cell(&l, budget, tc, k, mode))
            .collect::<Result<_>>()?
    } else {
        cells
            .iter()
            .map(|&(k, mode)| sweep_cell(&l, budget, tc, k, mode))
            .collect::<Result<_>>()?
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "mode", "feasible", "iter_time", "whole_time", "peak_mem", "stall"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.k.to_string(),
            r.mode.to_string(),
            r.feasible.to_string(),
            opt(r.iter_time.map(|v| v.to_string())),
            opt(r.whole_time.map(|v| v.to_string())),
            opt(r.peak_mem.map(|v| v.to_string())),
            opt(r.stall.map(|v| v.to_string())),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("{e}"))?;
    let mut out = Outputs::create(&a.out_dir, &mut m)?;
    out.write_bytes("sweep.csv", &bytes)?;
    out.finish(&m)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(OK)
}

pub fn pipeline(a: PipelineArgs) -> Result<u8> {
    let mut m = RunManifest::new("pipeline");
    if a.inputs.profiles.is_empty() && a.inputs.model.is_none() {
        bail!("--profiles is required");
    }
    let l = load_inputs(&a.inputs, a.efficiency, &mut m)?;
    let budget = a.budget_bytes.unwrap_or(l.hw.m_budget);
    m.param("budget_bytes", budget);
    m.param("step", a.step);
    m.param("tolerance", a.tolerance);
    record_training(&mut m, &a.training);
    let mut out = Outputs::create(&a.out_dir, &mut m)?;

    let diags = validate_gmap(&l.gmap);
    if !diags.is_empty() {
        for d in &diags {
            println!("gmap: {d}");
        }
        out.write_json("validate.json", &diags)?;
        out.finish(&m)?;
        return Ok(FAIL);
    }
    println!("validate: ok ({} phases)", l.gmap.num_phases());
    write_model(&mut out, &l.model)?;

    let opts = SearchOptions {
        step: a.step,
        parallel: false,
    };
    let outcome = run_plan(&l, budget, training(&a.training, &l.hw), opts)?;
    out.write_json("plan.json", &outcome)?;
    print!("{}", plan_text(&outcome, &l.gmap)?);
    let PlanOutcome::Planned(plan) = outcome else {
        out.finish(&m)?;
        return Ok(FAIL);
    };

    let r = run_sim(
        &l,
        SimMode::Dynamic,
        plan.k_star,
        budget,
        Some((&plan.pins(), plan.active_area_bytes)),
    )?;
    write_sim(&mut out, &r)?;
    print!("{}", sim_text(&r.summary));
    let v = verify_plan(&plan, &r.summary, a.tolerance)?;
    out.write_json("verdict.json", &v)?;
    out.finish(&m)?;
    println!("verify: {}", if v.pass { "pass" } else { "fail" });
    log::info!("pipeline finished for {}", l.spec.name);
    Ok(if v.pass { OK } else { FAIL })
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    time_s: String,
    stream: String,
    kind: String,
    #[allow(dead_code)]
    subject: String,
    #[allow(dead_code)]
    mem_used_bytes: u64,
}

/// Exact picoseconds from the fixed-point seconds the trace writer emits.
fn parse_ps(s: &str) -> Result<Ps> {
    let (whole, frac) = s.split_once('.').unwrap_or((s, "0"));
    if frac.len() > 12 {
        bail!("time {s:?} has more than 12 decimals");
    }
    let whole: Ps = whole.parse().with_context(|| format!("bad time {s:?}"))?;
    let frac: Ps = format!("{frac:0<12}").parse().with_context(|| format!("bad time {s:?}"))?;
    Ok(whole * 1_000_000_000_000 + frac)
}

#[derive(Serialize)]
struct StreamBusy {
    stream: String,
    busy_s: f64,
    utilization: f64,
}

fn stream_busy(path: &Path, iter_ps: Ps) -> Result<Vec<StreamBusy>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut open: BTreeMap<String, (u32, Ps)> = BTreeMap::new();
    let mut busy: BTreeMap<String, Ps> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: TraceRow = row?;
        let t = parse_ps(&row.time_s)?;
        let delta: i32 = match row.kind.as_str() {
            "kernel_start" | "xfer_start" => 1,
            "kernel_end" | "xfer_end" => -1,
            _ => continue,
        };
        busy.entry(row.stream.clone()).or_insert(0);
        let e = open.entry(row.stream.clone()).or_insert((0, 0));
        if e.0 > 0 {
            *busy.get_mut(&row.stream).expect("inserted above") += t - e.1;
        }
        e.0 = e.0.checked_add_signed(delta).ok_or_else(|| anyhow!("unbalanced trace at {}", row.time_s))?;
        e.1 = t;
    }
    Ok(busy
        .into_iter()
        .map(|(stream, ps)| StreamBusy {
            stream,
            busy_s: swapsched_core::ready::ps_to_seconds(ps),
            utilization: if iter_ps == 0 { 0.0 } else { ps as f64 / iter_ps as f64 },
        })
        .collect())
}

#[derive(Serialize)]
struct ReportDoc {
    mode: SimMode,
    k: u32,
    oom: bool,
    iter_time_s: f64,
    stall_s: f64,
    stall_fraction: f64,
    peak_mem_bytes: u64,
    budget_bytes: u64,
    stalled_phases: Vec<u32>,
    streams: Vec<StreamBusy>,
}

pub fn report(a: ReportArgs) -> Result<u8> {
    let mut m = RunManifest::new("report");
    m.input("summary", &a.summary)?;
    m.opt_input("trace", a.trace.as_deref())?;
    let text = fs::read_to_string(&a.summary).with_context(|| format!("reading {}", a.summary.display()))?;
    let s: SimSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.summary.display()))?;
    let streams = match &a.trace {
        Some(p) => stream_busy(p, s.iter_time_ps)?,
        None => Vec::new(),
    };
    let iter = s.iter_time();
    let doc = ReportDoc {
        mode: s.mode,
        k: s.k,
        oom: s.oom,
        iter_time_s: iter,
        stall_s: s.total_stall(),
        stall_fraction: if iter > 0.0 { s.total_stall() / iter } else { 0.0 },
        peak_mem_bytes: s.peak_mem_bytes,
        budget_bytes: s.budget_bytes,
        stalled_phases: s
            .per_phase_stall_ps
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0)
            .map(|(i, _)| i as u32 + 1)
            .collect(),
        streams,
    };
    let mut out = Outputs::create(&a.out_dir, &mut m)?;
    let mut mem = Vec::new();
    write_memory_csv(&mut mem, &s)?;
    out.write_bytes("memory.csv", &mem)?;
    if !s.oom {
        let mut stall = Vec::new();
        write_stall_csv(&mut stall, &s)?;
        out.write_bytes("stall.csv", &stall)?;
    }
    out.write_json("report.json", &doc)?;
    out.finish(&m)?;
    print!("{}", sim_text(&s));
    for b in &doc.streams {
        println!("{:<9} busy {:.6} s ({:.1}%)", b.stream, b.busy_s, 100.0 * b.utilization);
    }
    Ok(OK)
}

pub fn synth(a: SynthArgs) -> Result<u8> {
    if a.k_base == 0 || a.profile_k.contains(&0) {
        bail!("minibatch sizes must be positive");
    }
    let mut m = RunManifest::new("synth");
    m.param("seed", a.seed);
    m.param("units", a.units);
    m.param("layers", a.layers.map(|n| n.to_string()).unwrap_or_default());
    m.param("k_base", a.k_base);
    m.param("profile_k", a.profile_k.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
    m.param("bandwidth", a.bandwidth);
    m.param("noise", a.noise);
    m.param("budget_bytes", a.budget_bytes.map(|b| b.to_string()).unwrap_or_default());

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let spec = match a.layers {
        Some(n) if n > 0 => synth::random_network(&mut rng, n, a.k_base),
        Some(_) => bail!("--layers must be positive"),
        None if a.units > 0 => synth::resnet_like(a.units, a.k_base),
        None => bail!("--units must be positive"),
    };
    let gmap = build_gmap(&spec)?;
    let others = 64 << 20;
    let budget = match a.budget_bytes {
        Some(b) => b,
        None => {
            let peak = peak_layerwise_memory(&gmap, a.k_base.saturating_mul(4), &PinSet::new())?.bytes;
            others + gmap.resident_bytes() + peak
        }
    };
    let hw = HardwareSpec::new(budget, others, 0.01, a.bandwidth).validated()?;
    let truth = synth::default_truth();
    let set = synth::synth_profiles(
        &unfold_network(&spec),
        a.k_base,
        &truth,
        &a.profile_k,
        a.bandwidth,
        a.noise,
        &mut rng,
    );

    let mut out = Outputs::create(&a.out_dir, &mut m)?;
    out.write_json("network.json", &spec)?;
    out.write_json("hardware.json", &hw)?;
    let mut compute = Vec::new();
    write_compute_csv(&mut compute, &set.compute_samples)?;
    out.write_bytes("compute.csv", &compute)?;
    let mut transfer = Vec::new();
    write_transfer_csv(&mut transfer, &set.transfer_samples)?;
    out.write_bytes("transfer.csv", &transfer)?;
    out.finish(&m)?;
    println!(
        "{}: {} layers, budget {} bytes, {} compute and {} transfer samples",
        spec.name,
        spec.num_layers,
        budget,
        set.compute_samples.len(),
        set.transfer_samples.len()
    );
    Ok(OK)
}
