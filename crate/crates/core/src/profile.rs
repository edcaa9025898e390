//! Layer and network descriptors, and the JSON profile format.
//!
//! A profile is a flattened, forward-ordered list of layers. Only shapes
//! matter here: communication volume is a function of parameter counts and
//! activation sizes, compute time a function of flop counts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Relative tolerance for a stored `fwd_flops_per_sample` against the value
/// derived from the layer shape.
pub const FLOPS_TOLERANCE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("cannot read profile {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed profile: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid profile: {}", describe(.layer, .field, .reason))]
    Validation {
        layer: Option<usize>,
        field: &'static str,
        reason: String,
    },
}

fn describe(layer: &Option<usize>, field: &str, reason: &str) -> String {
    match layer {
        Some(id) => format!("layer {id}, field `{field}`: {reason}"),
        None => format!("field `{field}`: {reason}"),
    }
}

fn invalid(layer: Option<usize>, field: &'static str, reason: impl Into<String>) -> ProfileError {
    ProfileError::Validation {
        layer,
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    FullyConnected,
    NonParam,
}

/// Element precision of a buffer or of the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Fp32,
    Fp16,
    Int8,
}

impl Precision {
    pub const fn bytes(self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp16 => 2,
            Precision::Int8 => 1,
        }
    }

    /// Code used in the `dtype` byte of the wire header.
    pub const fn wire_code(self) -> u8 {
        match self {
            Precision::Fp32 => 0,
            Precision::Fp16 => 1,
            Precision::Int8 => 2,
        }
    }

    pub fn from_wire_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Precision::Fp32),
            1 => Some(Precision::Fp16),
            2 => Some(Precision::Int8),
            _ => None,
        }
    }

    pub const fn is_lossy(self) -> bool {
        !matches!(self, Precision::Fp32)
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Fp32 => "fp32",
            Precision::Fp16 => "fp16",
            Precision::Int8 => "int8",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Ok(Precision::Fp32),
            "fp16" => Ok(Precision::Fp16),
            "int8" => Ok(Precision::Int8),
            other => Err(format!("unknown precision `{other}` (expected fp32, fp16 or int8)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDescriptor {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    #[serde(rename = "C")]
    pub in_channels: u64,
    #[serde(rename = "K")]
    pub out_channels: u64,
    #[serde(rename = "OH")]
    pub out_h: u64,
    #[serde(rename = "OW")]
    pub out_w: u64,
    #[serde(rename = "KH")]
    pub kernel_h: u64,
    #[serde(rename = "KW")]
    pub kernel_w: u64,
    pub stride: u64,
    pub has_bias: bool,
    pub param_count: u64,
    pub fwd_flops_per_sample: f64,
}

impl LayerDescriptor {
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        id: usize,
        name: impl Into<String>,
        in_channels: u64,
        out_channels: u64,
        kernel: (u64, u64),
        out: (u64, u64),
        stride: u64,
        has_bias: bool,
    ) -> Self {
        Self::from_shape(
            id,
            name.into(),
            LayerKind::Conv,
            [in_channels, out_channels, out.0, out.1, kernel.0, kernel.1, stride],
            has_bias,
        )
    }

    pub fn fully_connected(
        id: usize,
        name: impl Into<String>,
        in_features: u64,
        out_features: u64,
        has_bias: bool,
    ) -> Self {
        Self::from_shape(
            id,
            name.into(),
            LayerKind::FullyConnected,
            [in_features, out_features, 1, 1, 1, 1, 1],
            has_bias,
        )
    }

    /// Pooling / activation style layer: compute only, nothing to communicate.
    pub fn non_param(
        id: usize,
        name: impl Into<String>,
        channels: u64,
        out: (u64, u64),
        window: (u64, u64),
        stride: u64,
    ) -> Self {
        Self::from_shape(
            id,
            name.into(),
            LayerKind::NonParam,
            [channels, channels, out.0, out.1, window.0, window.1, stride],
            false,
        )
    }

    fn from_shape(id: usize, name: String, kind: LayerKind, dims: [u64; 7], has_bias: bool) -> Self {
        let [c, k, oh, ow, kh, kw, stride] = dims;
        let mut layer = LayerDescriptor {
            id,
            name,
            kind,
            in_channels: c,
            out_channels: k,
            out_h: oh,
            out_w: ow,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            has_bias,
            param_count: 0,
            fwd_flops_per_sample: 0.0,
        };
        layer.param_count = layer.derived_param_count();
        layer.fwd_flops_per_sample = layer.derived_fwd_flops();
        layer
    }

    pub fn is_parameterized(&self) -> bool {
        self.kind != LayerKind::NonParam
    }

    /// Parameter count implied by the shape fields.
    pub fn derived_param_count(&self) -> u64 {
        let bias = if self.has_bias { self.out_channels } else { 0 };
        match self.kind {
            LayerKind::Conv => {
                self.in_channels * self.out_channels * self.kernel_h * self.kernel_w + bias
            }
            LayerKind::FullyConnected => self.in_channels * self.out_channels + bias,
            LayerKind::NonParam => 0,
        }
    }

    /// Forward flops per sample implied by the shape fields. NonParam layers
    /// count one operation per window element per output.
    pub fn derived_fwd_flops(&self) -> f64 {
        let (c, k) = (self.in_channels as f64, self.out_channels as f64);
        let (oh, ow) = (self.out_h as f64, self.out_w as f64);
        let (kh, kw) = (self.kernel_h as f64, self.kernel_w as f64);
        match self.kind {
            LayerKind::Conv => 2.0 * c * k * kh * kw * oh * ow,
            LayerKind::FullyConnected => 2.0 * c * k,
            LayerKind::NonParam => k * oh * ow * kh * kw,
        }
    }

    /// Output feature-map elements for one sample (K·OH·OW).
    pub fn activation_elems_per_sample(&self) -> u64 {
        self.out_channels * self.out_h * self.out_w
    }

    fn validate(&self) -> Result<(), ProfileError> {
        let id = Some(self.id);
        let dims = [
            ("C", self.in_channels),
            ("K", self.out_channels),
            ("OH", self.out_h),
            ("OW", self.out_w),
            ("KH", self.kernel_h),
            ("KW", self.kernel_w),
            ("stride", self.stride),
        ];
        for (field, value) in dims {
            if value == 0 {
                return Err(invalid(id, field, "must be at least 1"));
            }
        }
        if self.kind == LayerKind::FullyConnected {
            for (field, value) in &dims[2..6] {
                if *value != 1 {
                    return Err(invalid(id, field, "must be 1 for a FullyConnected layer"));
                }
            }
        }
        let expected = self.derived_param_count();
        if self.param_count != expected {
            return Err(invalid(
                id,
                "param_count",
                format!("stored {} but shape implies {expected}", self.param_count),
            ));
        }
        let expected = self.derived_fwd_flops();
        let stored = self.fwd_flops_per_sample;
        if !stored.is_finite() || (stored - expected).abs() > FLOPS_TOLERANCE * expected {
            return Err(invalid(
                id,
                "fwd_flops_per_sample",
                format!("stored {stored} but shape implies {expected}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelProfile {
    pub name: String,
    pub default_minibatch: u64,
    pub layers: Vec<LayerDescriptor>,
}

// On-disk form: derived fields are optional.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    name: String,
    default_minibatch: u64,
    layers: Vec<RawLayer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    id: usize,
    name: String,
    kind: LayerKind,
    #[serde(rename = "C")]
    c: u64,
    #[serde(rename = "K")]
    k: u64,
    #[serde(rename = "OH")]
    oh: u64,
    #[serde(rename = "OW")]
    ow: u64,
    #[serde(rename = "KH")]
    kh: u64,
    #[serde(rename = "KW")]
    kw: u64,
    stride: u64,
    has_bias: bool,
    #[serde(default)]
    param_count: Option<u64>,
    #[serde(default)]
    fwd_flops_per_sample: Option<f64>,
}

impl RawLayer {
    fn into_layer(self) -> LayerDescriptor {
        let mut layer = LayerDescriptor::from_shape(
            self.id,
            self.name,
            self.kind,
            [self.c, self.k, self.oh, self.ow, self.kh, self.kw, self.stride],
            self.has_bias,
        );
        if let Some(p) = self.param_count {
            layer.param_count = p;
        }
        if let Some(f) = self.fwd_flops_per_sample {
            layer.fwd_flops_per_sample = f;
        }
        layer
    }
}

impl ModelProfile {
    /// Builds and validates a profile from already-constructed layers.
    pub fn new(
        name: impl Into<String>,
        default_minibatch: u64,
        layers: Vec<LayerDescriptor>,
    ) -> Result<Self, ProfileError> {
        let profile = ModelProfile {
            name: name.into(),
            default_minibatch,
            layers,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ProfileError> {
        let raw: RawProfile = serde_json::from_str(text)?;
        let layers = raw.layers.into_iter().map(RawLayer::into_layer).collect();
        ModelProfile::new(raw.name, raw.default_minibatch, layers)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProfileError> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string() + "\n").map_err(|source| ProfileError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.default_minibatch == 0 {
            return Err(invalid(None, "default_minibatch", "must be at least 1"));
        }
        if self.layers.is_empty() {
            return Err(invalid(None, "layers", "profile has no layers"));
        }
        for (index, layer) in self.layers.iter().enumerate() {
            if layer.id != index {
                return Err(invalid(
                    Some(layer.id),
                    "id",
                    format!("expected id {index} (ids must be 0..L-1 in order)"),
                ));
            }
            layer.validate()?;
        }
        if !self.layers.iter().any(LayerDescriptor::is_parameterized) {
            return Err(invalid(None, "layers", "no parameterized layer"));
        }
        Ok(())
    }

    pub fn total_params(&self) -> u64 {
        total_params(&self.layers)
    }

    pub fn parameterized(&self) -> impl Iterator<Item = &LayerDescriptor> {
        self.layers.iter().filter(|l| l.is_parameterized())
    }

    pub fn layer(&self, id: usize) -> Option<&LayerDescriptor> {
        self.layers.get(id)
    }
}

/// Sum of `param_count` over the given layers.
pub fn total_params(layers: &[LayerDescriptor]) -> u64 {
    layers.iter().map(|l| l.param_count).sum()
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<ModelProfile, ProfileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ModelProfile::from_json_str(&text)
}
