//! Layer-level network description and its unfolding into propagation phases.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::FORMAT_VERSION;

/// Default multiplier applied to forward FLOPs when a layer omits its
/// backward FLOP count.
pub const DEFAULT_BACKWARD_FLOPS_FACTOR: f64 = 2.0;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("failed to read network spec {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed network spec: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported format_version {0} (expected {FORMAT_VERSION})")]
    FormatVersion(u32),
    #[error("network must have at least one layer")]
    Empty,
    #[error("k_base must be positive")]
    ZeroBaseMinibatch,
    #[error("num_layers is {declared} but {actual} layers are listed")]
    LayerCount { declared: u32, actual: usize },
    #[error("duplicate layer index {0}")]
    DuplicateIndex(u32),
    #[error("missing layer index {0}")]
    MissingIndex(u32),
    #[error("layer {0}: forward FLOPs must be positive")]
    NonPositiveFlops(u32),
    #[error("layer {0}: backward FLOPs must be positive")]
    NonPositiveBackwardFlops(u32),
    #[error("backward_flops_factor must be positive and finite, got {0}")]
    BadBackwardFactor(f64),
    #[error("unknown layer_type {0:?} (use \"other:<tag>\" for custom types)")]
    UnknownLayerType(String),
}

/// Layer categories that get their own throughput curve.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerType {
    Conv,
    Bn,
    Activation,
    Pooling,
    Fc,
    Other(String),
}

impl LayerType {
    pub fn as_str(&self) -> std::borrow::Cow<'_, str> {
        match self {
            LayerType::Conv => "conv".into(),
            LayerType::Bn => "bn".into(),
            LayerType::Activation => "activation".into(),
            LayerType::Pooling => "pooling".into(),
            LayerType::Fc => "fc".into(),
            LayerType::Other(tag) => format!("other:{tag}").into(),
        }
    }
}

impl fmt::Display for LayerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str())
    }
}

impl FromStr for LayerType {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "conv" => LayerType::Conv,
            "bn" => LayerType::Bn,
            "activation" => LayerType::Activation,
            "pooling" => LayerType::Pooling,
            "fc" => LayerType::Fc,
            other => match other.strip_prefix("other:") {
                Some(tag) if !tag.is_empty() => LayerType::Other(tag.to_string()),
                _ => return Err(NetworkError::UnknownLayerType(other.to_string())),
            },
        })
    }
}

impl Serialize for LayerType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.as_str())
    }
}

impl<'de> Deserialize<'de> for LayerType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One layer of the network. Sizes are in bytes at `k_base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecl {
    pub index: u32,
    pub layer_type: LayerType,
    pub flops_fwd_base: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_bwd_base: Option<u64>,
    pub featuremap_bytes_base: u64,
    #[serde(default)]
    pub param_bytes: u64,
    #[serde(default)]
    pub grad_bytes: u64,
    #[serde(default)]
    pub workspace_bytes_base: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub format_version: u32,
    pub name: String,
    pub num_layers: u32,
    pub k_base: u32,
    #[serde(default = "default_bwd_factor")]
    pub backward_flops_factor: f64,
    pub layers: Vec<LayerDecl>,
}

fn default_bwd_factor() -> f64 {
    DEFAULT_BACKWARD_FLOPS_FACTOR
}

impl NetworkSpec {
    /// Builds a spec from layers, sorting them by index and validating.
    pub fn new(
        name: impl Into<String>,
        k_base: u32,
        backward_flops_factor: f64,
        mut layers: Vec<LayerDecl>,
    ) -> Result<Self, NetworkError> {
        layers.sort_by_key(|l| l.index);
        let spec = NetworkSpec {
            format_version: FORMAT_VERSION,
            name: name.into(),
            num_layers: layers.len() as u32,
            k_base,
            backward_flops_factor,
            layers,
        };
        spec.validated()
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let spec: NetworkSpec = serde_json::from_str(text)?;
        spec.validated()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }

    /// Checks every invariant and fills in missing backward FLOPs.
    pub fn validated(mut self) -> Result<Self, NetworkError> {
        if self.format_version != FORMAT_VERSION {
            return Err(NetworkError::FormatVersion(self.format_version));
        }
        if self.layers.is_empty() {
            return Err(NetworkError::Empty);
        }
        if self.k_base == 0 {
            return Err(NetworkError::ZeroBaseMinibatch);
        }
        if !(self.backward_flops_factor.is_finite() && self.backward_flops_factor > 0.0) {
            return Err(NetworkError::BadBackwardFactor(self.backward_flops_factor));
        }
        if self.num_layers as usize != self.layers.len() {
            return Err(NetworkError::LayerCount {
                declared: self.num_layers,
                actual: self.layers.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for layer in &self.layers {
            if !seen.insert(layer.index) {
                return Err(NetworkError::DuplicateIndex(layer.index));
            }
        }
        for idx in 1..=self.num_layers {
            if !seen.contains(&idx) {
                return Err(NetworkError::MissingIndex(idx));
            }
        }
        self.layers.sort_by_key(|l| l.index);
        let factor = self.backward_flops_factor;
        for layer in &mut self.layers {
            if layer.flops_fwd_base == 0 {
                return Err(NetworkError::NonPositiveFlops(layer.index));
            }
            match layer.flops_bwd_base {
                Some(0) => return Err(NetworkError::NonPositiveBackwardFlops(layer.index)),
                Some(_) => {}
                None => {
                    let bwd = (layer.flops_fwd_base as f64 * factor).round().max(1.0);
                    layer.flops_bwd_base = Some(bwd as u64);
                }
            }
        }
        Ok(self)
    }

    pub fn layer(&self, index: u32) -> Option<&LayerDecl> {
        self.layers.get(index.checked_sub(1)? as usize)
    }

    /// Bytes of parameters and gradients, resident for the whole run.
    pub fn resident_bytes(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.param_bytes + l.grad_bytes)
            .sum()
    }

    pub fn layer_types(&self) -> BTreeSet<LayerType> {
        self.layers.iter().map(|l| l.layer_type.clone()).collect()
    }
}

pub fn parse_network_spec(path: impl AsRef<Path>) -> Result<NetworkSpec, NetworkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    NetworkSpec::from_json(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// One of the 2N propagation phases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseLayer {
    /// 1-based phase index in `[1, 2N]`.
    pub phase: u32,
    pub source_layer: u32,
    pub direction: Direction,
    pub layer_type: LayerType,
    pub flops_base: u64,
}

impl fmt::Display for PhaseLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.direction {
            Direction::Forward => 'F',
            Direction::Backward => 'B',
        };
        write!(f, "{d}{}", self.source_layer)
    }
}

/// Maps a 1-based phase index of an `n`-layer network to its source layer.
pub fn phase_source(n: u32, phase: u32) -> (u32, Direction) {
    debug_assert!(phase >= 1 && phase <= 2 * n);
    if phase <= n {
        (phase, Direction::Forward)
    } else {
        (2 * n + 1 - phase, Direction::Backward)
    }
}

/// Forward phases in layer order followed by backward phases in reverse order.
pub fn unfold_network(spec: &NetworkSpec) -> Vec<PhaseLayer> {
    let n = spec.num_layers;
    (1..=2 * n)
        .map(|phase| {
            let (src, direction) = phase_source(n, phase);
            let layer = &spec.layers[src as usize - 1];
            let flops_base = match direction {
                Direction::Forward => layer.flops_fwd_base,
                Direction::Backward => layer
                    .flops_bwd_base
                    .expect("validated spec has backward flops"),
            };
            PhaseLayer {
                phase,
                source_layer: src,
                direction,
                layer_type: layer.layer_type.clone(),
                flops_base,
            }
        })
        .collect()
}
