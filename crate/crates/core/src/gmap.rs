//! Global memory-object access pattern.
//!
//! A [`Gmap`] is the ordered list of allocate / prefetch / offload / release
//! operations over one training iteration. Its structure is fixed by the
//! network; only byte sizes depend on the minibatch. Within a phase, ops are
//! ordered allocate < prefetch < (kernel) < offload < release, then by object.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::network::{unfold_network, Direction, NetworkSpec, PhaseLayer};

/// Allocation granule in bytes; every scaled size is rounded up to it.
pub const DEFAULT_GRANULE: u64 = 512;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GmapError {
    #[error("minibatch size must be positive")]
    ZeroMinibatch,
    #[error("inconsistent access pattern: {0}")]
    Inconsistent(String),
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Workspace,
    Featuremap,
    BackwardWorkspace,
}

/// Identifies a memory object: the layer it belongs to and its role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId {
    pub layer: u32,
    pub slot: Slot,
}

impl ObjectId {
    pub fn featuremap(layer: u32) -> Self {
        ObjectId { layer, slot: Slot::Featuremap }
    }
    pub fn workspace(layer: u32) -> Self {
        ObjectId { layer, slot: Slot::Workspace }
    }
    pub fn backward_workspace(layer: u32) -> Self {
        ObjectId { layer, slot: Slot::BackwardWorkspace }
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.slot {
            Slot::Workspace => "ws",
            Slot::Featuremap => "fm",
            Slot::BackwardWorkspace => "wsb",
        };
        write!(f, "{prefix}{}", self.layer)
    }
}

impl FromStr for ObjectId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (slot, rest) = if let Some(r) = s.strip_prefix("wsb") {
            (Slot::BackwardWorkspace, r)
        } else if let Some(r) = s.strip_prefix("ws") {
            (Slot::Workspace, r)
        } else if let Some(r) = s.strip_prefix("fm") {
            (Slot::Featuremap, r)
        } else {
            return Err(format!("bad object id {s:?}"));
        };
        let layer = rest.parse().map_err(|_| format!("bad object id {s:?}"))?;
        Ok(ObjectId { layer, slot })
    }
}

impl Serialize for ObjectId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObjectId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

pub type PinSet = BTreeSet<ObjectId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Featuremap,
    Workspace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemObject {
    pub id: ObjectId,
    pub kind: ObjectKind,
    pub size_base: u64,
    pub scales_with_minibatch: bool,
    pub producer_phase: u32,
    pub last_use_phase: u32,
}

/// Ordering of the variants is the within-phase tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Allocate,
    Prefetch,
    Offload,
    Release,
}

impl OpKind {
    /// Ops issued before the phase's kernel (the `Seq_allocate` side).
    pub fn is_pre_kernel(self) -> bool {
        matches!(self, OpKind::Allocate | OpKind::Prefetch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemOp {
    pub kind: OpKind,
    pub object: ObjectId,
    pub phase: u32,
    /// 1-based position in the iteration.
    pub seq: u32,
}

/// Rounds `size_base * k / k_base` (or `size_base` when not scaling) up to
/// a multiple of `granule`.
pub fn scale_bytes(
    size_base: u64,
    scales: bool,
    k: u32,
    k_base: u32,
    granule: u64,
) -> Result<u64, GmapError> {
    if k == 0 || k_base == 0 {
        return Err(GmapError::ZeroMinibatch);
    }
    let raw = if scales {
        let num = size_base as u128 * k as u128;
        num.div_ceil(k_base as u128)
    } else {
        size_base as u128
    };
    let g = granule.max(1) as u128;
    let aligned = raw.div_ceil(g) * g;
    Ok(u64::try_from(aligned).expect("scaled size overflows u64"))
}

/// Memory peak found by a running-sum traversal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PeakInfo {
    pub bytes: u64,
    /// Sequence number of the op at which the peak is first reached.
    pub seq: Option<u32>,
    /// Objects resident right after that op.
    pub live: Vec<ObjectId>,
}

#[derive(Serialize, Deserialize)]
struct GmapDoc {
    format_version: u32,
    k_base: u32,
    granule: u64,
    resident_bytes: u64,
    phases: Vec<PhaseLayer>,
    objects: Vec<MemObject>,
    ops: Vec<MemOp>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gmap {
    num_layers: u32,
    k_base: u32,
    granule: u64,
    resident_bytes: u64,
    phases: Vec<PhaseLayer>,
    objects: BTreeMap<ObjectId, MemObject>,
    ops: Vec<MemOp>,
    by_phase: Vec<Vec<usize>>,
}

impl Gmap {
    /// Assembles a GMAP without checking it; see [`validate_gmap`].
    pub fn from_parts(
        k_base: u32,
        granule: u64,
        resident_bytes: u64,
        phases: Vec<PhaseLayer>,
        objects: impl IntoIterator<Item = MemObject>,
        ops: Vec<MemOp>,
    ) -> Self {
        let num_phases = phases.len();
        let mut by_phase = vec![Vec::new(); num_phases];
        for (i, op) in ops.iter().enumerate() {
            if let Some(bucket) = (op.phase as usize)
                .checked_sub(1)
                .and_then(|p| by_phase.get_mut(p))
            {
                bucket.push(i);
            }
        }
        Gmap {
            num_layers: (num_phases / 2) as u32,
            k_base,
            granule,
            resident_bytes,
            phases,
            objects: objects.into_iter().map(|o| (o.id, o)).collect(),
            ops,
            by_phase,
        }
    }

    pub fn to_json(&self) -> String {
        let doc = GmapDoc {
            format_version: crate::FORMAT_VERSION,
            k_base: self.k_base,
            granule: self.granule,
            resident_bytes: self.resident_bytes,
            phases: self.phases.clone(),
            objects: self.objects.values().cloned().collect(),
            ops: self.ops.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("gmap serializes")
    }

    /// Reads a GMAP document without validating it.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let doc: GmapDoc = serde_json::from_str(text)?;
        Ok(Gmap::from_parts(
            doc.k_base,
            doc.granule,
            doc.resident_bytes,
            doc.phases,
            doc.objects,
            doc.ops,
        ))
    }

    pub fn num_layers(&self) -> u32 {
        self.num_layers
    }
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }
    pub fn k_base(&self) -> u32 {
        self.k_base
    }
    pub fn granule(&self) -> u64 {
        self.granule
    }
    /// Parameter and gradient bytes; charged as fixed overhead.
    pub fn resident_bytes(&self) -> u64 {
        self.resident_bytes
    }
    pub fn phases(&self) -> &[PhaseLayer] {
        &self.phases
    }
    pub fn ops(&self) -> &[MemOp] {
        &self.ops
    }
    pub fn objects(&self) -> impl Iterator<Item = &MemObject> {
        self.objects.values()
    }
    pub fn object(&self, id: ObjectId) -> Option<&MemObject> {
        self.objects.get(&id)
    }

    pub fn featuremaps(&self) -> impl Iterator<Item = &MemObject> {
        self.objects
            .values()
            .filter(|o| o.kind == ObjectKind::Featuremap)
    }

    /// Ops of 1-based phase `j`, in sequence order.
    pub fn phase_ops(&self, j: u32) -> impl Iterator<Item = &MemOp> + '_ {
        let idx: &[usize] = (j as usize)
            .checked_sub(1)
            .and_then(|p| self.by_phase.get(p))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        idx.iter().map(move |&i| &self.ops[i])
    }

    pub fn scaled_size(&self, id: ObjectId, k: u32) -> Result<u64, GmapError> {
        let obj = self.objects.get(&id).ok_or(GmapError::UnknownObject(id))?;
        scale_bytes(
            obj.size_base,
            obj.scales_with_minibatch,
            k,
            self.k_base,
            self.granule,
        )
    }

    /// Signed byte change caused by `op` at minibatch `k`. Pinned objects are
    /// never offloaded, so their offload/prefetch ops move no memory.
    pub fn op_delta(&self, op: &MemOp, k: u32, pins: &PinSet) -> Result<i128, GmapError> {
        let size = self.scaled_size(op.object, k)? as i128;
        let pinned = pins.contains(&op.object);
        Ok(match op.kind {
            OpKind::Allocate => size,
            OpKind::Release => -size,
            OpKind::Offload if pinned => 0,
            OpKind::Prefetch if pinned => 0,
            OpKind::Offload => -size,
            OpKind::Prefetch => size,
        })
    }

    /// Sum of scaled sizes of `ids` at `k`.
    pub fn total_size<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a ObjectId>,
        k: u32,
    ) -> Result<u64, GmapError> {
        ids.into_iter().map(|id| self.scaled_size(*id, k)).sum()
    }
}

/// Builds the access pattern: featuremaps are offloaded right after the
/// producing forward phase and prefetched before the backward phase of the
/// same layer; workspaces live within their phase.
pub fn build_gmap(spec: &NetworkSpec) -> Result<Gmap, GmapError> {
    let phases = unfold_network(spec);
    let n = spec.num_layers;
    let mut objects = Vec::new();
    let mut per_phase: Vec<Vec<(OpKind, ObjectId)>> = vec![Vec::new(); phases.len()];

    for layer in &spec.layers {
        let i = layer.index;
        let fwd = i;
        let bwd = 2 * n + 1 - i;
        objects.push(MemObject {
            id: ObjectId::workspace(i),
            kind: ObjectKind::Workspace,
            size_base: layer.workspace_bytes_base,
            scales_with_minibatch: true,
            producer_phase: fwd,
            last_use_phase: fwd,
        });
        objects.push(MemObject {
            id: ObjectId::featuremap(i),
            kind: ObjectKind::Featuremap,
            size_base: layer.featuremap_bytes_base,
            scales_with_minibatch: true,
            producer_phase: fwd,
            last_use_phase: bwd,
        });
        objects.push(MemObject {
            id: ObjectId::backward_workspace(i),
            kind: ObjectKind::Workspace,
            size_base: layer.workspace_bytes_base,
            scales_with_minibatch: true,
            producer_phase: bwd,
            last_use_phase: bwd,
        });
    }

    for phase in &phases {
        let ops = &mut per_phase[phase.phase as usize - 1];
        let i = phase.source_layer;
        match phase.direction {
            Direction::Forward => {
                ops.push((OpKind::Allocate, ObjectId::workspace(i)));
                ops.push((OpKind::Allocate, ObjectId::featuremap(i)));
                ops.push((OpKind::Offload, ObjectId::featuremap(i)));
                ops.push((OpKind::Release, ObjectId::workspace(i)));
            }
            Direction::Backward => {
                ops.push((OpKind::Allocate, ObjectId::backward_workspace(i)));
                ops.push((OpKind::Prefetch, ObjectId::featuremap(i)));
                ops.push((OpKind::Release, ObjectId::featuremap(i)));
                ops.push((OpKind::Release, ObjectId::backward_workspace(i)));
            }
        }
        ops.sort();
    }

    let mut ops = Vec::new();
    for (p, phase_ops) in per_phase.into_iter().enumerate() {
        for (kind, object) in phase_ops {
            ops.push(MemOp {
                kind,
                object,
                phase: p as u32 + 1,
                seq: ops.len() as u32 + 1,
            });
        }
    }

    let gmap = Gmap::from_parts(
        spec.k_base,
        DEFAULT_GRANULE,
        spec.resident_bytes(),
        phases,
        objects,
        ops,
    );
    let diags = validate_gmap(&gmap);
    if let Some(d) = diags.first() {
        return Err(GmapError::Inconsistent(d.to_string()));
    }
    Ok(gmap)
}

/// How pinned objects are charged during a running-sum traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinnedAccounting {
    /// Resident from allocate to release.
    Lifetime,
    /// Left out of the sum entirely (they live in a separate region).
    Excluded,
}

/// Running byte usage after each op.
pub fn running_usage(
    gmap: &Gmap,
    k: u32,
    pins: &PinSet,
    accounting: PinnedAccounting,
) -> Result<Vec<u64>, GmapError> {
    let mut sum: i128 = 0;
    let mut out = Vec::with_capacity(gmap.ops.len());
    for op in &gmap.ops {
        if accounting == PinnedAccounting::Excluded && pins.contains(&op.object) {
            out.push(sum as u64);
            continue;
        }
        sum += gmap.op_delta(op, k, pins)?;
        if sum < 0 {
            return Err(GmapError::Inconsistent(format!(
                "running usage negative at op {}",
                op.seq
            )));
        }
        out.push(sum as u64);
    }
    Ok(out)
}

/// Peak layer-wise memory: the maximum of the running sum where non-pinned
/// featuremaps leave the device as soon as they are offloaded.
pub fn peak_layerwise_memory(gmap: &Gmap, k: u32, pins: &PinSet) -> Result<PeakInfo, GmapError> {
    let usage = running_usage(gmap, k, pins, PinnedAccounting::Lifetime)?;
    let mut best = 0u64;
    let mut at = None;
    for (i, &u) in usage.iter().enumerate() {
        if u > best {
            best = u;
            at = Some(i);
        }
    }
    let live = match at {
        Some(end) => live_after(gmap, end, pins),
        None => Vec::new(),
    };
    Ok(PeakInfo {
        bytes: best,
        seq: at.map(|i| gmap.ops[i].seq),
        live,
    })
}

fn live_after(gmap: &Gmap, end: usize, pins: &PinSet) -> Vec<ObjectId> {
    let mut live = BTreeSet::new();
    for op in &gmap.ops[..=end] {
        let pinned = pins.contains(&op.object);
        match op.kind {
            OpKind::Allocate => {
                live.insert(op.object);
            }
            OpKind::Prefetch if !pinned => {
                live.insert(op.object);
            }
            OpKind::Offload if !pinned => {
                live.remove(&op.object);
            }
            OpKind::Release => {
                live.remove(&op.object);
            }
            _ => {}
        }
    }
    live.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    Sequence,
    UnknownObject,
    PhaseRange,
    PhaseOrder,
    TieBreak,
    Multiplicity,
    Ordering,
    SwapOnNonFeaturemap,
    Lifetime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub seqs: Vec<u32>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at ops {:?}: {}", self.kind, self.seqs, self.message)
    }
}

#[derive(Default)]
struct ObjectOps {
    allocate: Vec<(u32, u32)>,
    offload: Vec<(u32, u32)>,
    prefetch: Vec<(u32, u32)>,
    release: Vec<(u32, u32)>,
}

/// Checks every structural invariant. Empty result means well formed.
pub fn validate_gmap(gmap: &Gmap) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut push = |kind, seqs: Vec<u32>, message: String| {
        diags.push(Diagnostic { kind, seqs, message })
    };
    let num_phases = gmap.phases.len() as u32;
    let mut per_object: BTreeMap<ObjectId, ObjectOps> = BTreeMap::new();

    let mut prev: Option<&MemOp> = None;
    for (i, op) in gmap.ops.iter().enumerate() {
        if op.seq != i as u32 + 1 {
            push(
                DiagnosticKind::Sequence,
                vec![op.seq],
                format!("op at position {} has sequence number {}", i + 1, op.seq),
            );
        }
        if op.phase == 0 || op.phase > num_phases {
            push(
                DiagnosticKind::PhaseRange,
                vec![op.seq],
                format!("phase {} outside [1, {num_phases}]", op.phase),
            );
        }
        if let Some(p) = prev {
            if op.phase < p.phase {
                push(
                    DiagnosticKind::PhaseOrder,
                    vec![p.seq, op.seq],
                    format!("phase {} follows phase {}", op.phase, p.phase),
                );
            } else if op.phase == p.phase && (op.kind, op.object) < (p.kind, p.object) {
                push(
                    DiagnosticKind::TieBreak,
                    vec![p.seq, op.seq],
                    format!(
                        "{:?} {} after {:?} {} within phase {}",
                        op.kind, op.object, p.kind, p.object, op.phase
                    ),
                );
            }
        }
        prev = Some(op);

        let Some(obj) = gmap.objects.get(&op.object) else {
            push(
                DiagnosticKind::UnknownObject,
                vec![op.seq],
                format!("object {} is not declared", op.object),
            );
            continue;
        };
        if matches!(op.kind, OpKind::Offload | OpKind::Prefetch) && obj.kind != ObjectKind::Featuremap
        {
            push(
                DiagnosticKind::SwapOnNonFeaturemap,
                vec![op.seq],
                format!("{:?} on non-featuremap {}", op.kind, op.object),
            );
        }
        let entry = per_object.entry(op.object).or_default();
        let rec = (op.seq, op.phase);
        match op.kind {
            OpKind::Allocate => entry.allocate.push(rec),
            OpKind::Offload => entry.offload.push(rec),
            OpKind::Prefetch => entry.prefetch.push(rec),
            OpKind::Release => entry.release.push(rec),
        }
    }

    for obj in gmap.objects.values() {
        let id = obj.id;
        let ops = per_object.remove(&id).unwrap_or_default();
        let seqs = |v: &[(u32, u32)]| v.iter().map(|r| r.0).collect::<Vec<_>>();
        if obj.producer_phase > obj.last_use_phase {
            push(
                DiagnosticKind::Lifetime,
                vec![],
                format!(
                    "{id}: producer phase {} after last use {}",
                    obj.producer_phase, obj.last_use_phase
                ),
            );
        }
        if ops.allocate.len() != 1 {
            push(
                DiagnosticKind::Multiplicity,
                seqs(&ops.allocate),
                format!("{id} allocated {} times", ops.allocate.len()),
            );
        }
        if ops.release.len() != 1 {
            push(
                DiagnosticKind::Multiplicity,
                seqs(&ops.release),
                format!("{id} released {} times", ops.release.len()),
            );
        }
        if ops.offload.len() > 1 || ops.prefetch.len() > 1 || ops.offload.len() != ops.prefetch.len()
        {
            let mut s = seqs(&ops.offload);
            s.extend(seqs(&ops.prefetch));
            push(
                DiagnosticKind::Multiplicity,
                s,
                format!(
                    "{id} has {} offloads and {} prefetches",
                    ops.offload.len(),
                    ops.prefetch.len()
                ),
            );
        }
        // allocate < offload < prefetch < release
        let chain: Vec<(&str, Option<(u32, u32)>)> = vec![
            ("allocate", ops.allocate.first().copied()),
            ("offload", ops.offload.first().copied()),
            ("prefetch", ops.prefetch.first().copied()),
            ("release", ops.release.first().copied()),
        ];
        let present: Vec<_> = chain
            .iter()
            .filter_map(|(n, r)| r.map(|r| (*n, r)))
            .collect();
        for w in present.windows(2) {
            let ((a_name, (a_seq, _)), (b_name, (b_seq, _))) = (w[0], w[1]);
            if a_seq >= b_seq {
                push(
                    DiagnosticKind::Ordering,
                    vec![a_seq, b_seq],
                    format!("{id}: {b_name} (op {b_seq}) does not follow {a_name} (op {a_seq})"),
                );
            }
        }
        if let Some(&(seq, phase)) = ops.allocate.first() {
            if phase != obj.producer_phase {
                push(
                    DiagnosticKind::Lifetime,
                    vec![seq],
                    format!(
                        "{id} allocated in phase {phase}, producer phase is {}",
                        obj.producer_phase
                    ),
                );
            }
        }
        if let Some(&(seq, phase)) = ops.release.first() {
            if phase != obj.last_use_phase {
                push(
                    DiagnosticKind::Lifetime,
                    vec![seq],
                    format!(
                        "{id} released in phase {phase}, last use is {}",
                        obj.last_use_phase
                    ),
                );
            }
        }
    }
    diags
}
