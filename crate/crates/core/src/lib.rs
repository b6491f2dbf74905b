//! Memory-swap planning and simulation for DNN training on a single device.
//!
//! The pipeline: describe a network and device ([`network`], [`hardware`]),
//! derive its memory access pattern ([`gmap`]), fit throughput curves from
//! profiles ([`profile`], [`perf`]), pick a minibatch size and pin set
//! ([`planner`]) and check the result by simulation ([`sim`]).

pub mod gmap;
pub mod hardware;
pub mod lr;
pub mod network;
pub mod perf;
pub mod planner;
pub mod profile;
pub mod ready;
pub mod sim;
pub mod synth;

/// Version stamped into every document this crate reads or writes.
pub const FORMAT_VERSION: u32 = 1;

pub use gmap::{
    build_gmap, peak_layerwise_memory, scale_bytes, validate_gmap, Diagnostic, Gmap, GmapError,
    MemObject, MemOp, ObjectId, OpKind, PinSet,
};
pub use hardware::{parse_hardware_spec, HardwareError, HardwareSpec};
pub use lr::{adapted_learning_rate, contraction_residual, LrConfig, LrError};
pub use network::{
    parse_network_spec, unfold_network, Direction, LayerDecl, LayerType, NetworkError, NetworkSpec,
    PhaseLayer,
};
pub use perf::{
    fit_throughput_curve, iteration_time, layer_compute_time, transfer_time, whole_training_time,
    PerfError, PerfModel, ThroughputCurve, TrainingConfig,
};
pub use planner::{
    adjust_iterations, check_memory_constraint, check_stall_constraint, evaluate_k,
    find_efficiency_optimal_minibatch, max_trainable_minibatch, PlanContext, PlanError,
    PlanOutcome, SearchOptions, SwapPlan,
};
pub use profile::{load_profiles, ProfileError, ProfileSet};
pub use ready::{compute_t_ready, Ps, ReadySchedule};
pub use sim::{
    simulate_iteration, stall_report, verify_plan, SimConfig, SimError, SimMode, SimResult,
    SimSummary,
};
