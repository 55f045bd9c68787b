//! Declarative network architecture, shape propagation and MAC bookkeeping.
//!
//! This is the shared vocabulary of the emulator and the extractor: the
//! emulator walks an [`Architecture`] to produce an event tree, the extractor
//! rebuilds one from a trace.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchError {
    #[error("non-integral output side: ({h_in} - {z} + 2*{p}) is not divisible by stride {s}")]
    NonIntegralShape { h_in: usize, z: usize, p: usize, s: usize },
    #[error("kernel side {z} with padding {p} does not fit input side {h_in}")]
    KernelTooLarge { h_in: usize, z: usize, p: usize },
    #[error("input side {h_in} is not divisible by pooling size {z_pool}")]
    DivisibilityError { h_in: usize, z_pool: usize },
    #[error("invalid layer {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },
    #[error("architecture has no layers")]
    Empty,
    #[error("architecture JSON: {0}")]
    Json(String),
}

/// Square tensor of side `h` with `c` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorShape {
    pub h: usize,
    pub c: usize,
}

impl TensorShape {
    pub fn new(h: usize, c: usize) -> Self {
        Self { h, c }
    }

    /// Number of scalar elements, i.e. the flattened vector length.
    pub fn len(&self) -> usize {
        self.h * self.h * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.h, self.c)
    }
}

/// CMSIS-NN convolution kernel flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvVariant {
    Basic,
    Fast,
    #[serde(rename = "rgb")]
    Rgb,
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    /// Kernel count, equal to the output channel count.
    pub k: usize,
    /// Kernel side.
    pub z: usize,
    pub s: usize,
    pub p: usize,
    #[serde(default)]
    pub variant: ConvVariant,
}

impl ConvSpec {
    pub fn new(k: usize, z: usize, s: usize, p: usize) -> Self {
        Self { k, z, s, p, variant: ConvVariant::Auto }
    }

    /// The kernel actually dispatched for `c_in` input channels.
    pub fn resolved_variant(&self, c_in: usize) -> ConvVariant {
        match self.variant {
            ConvVariant::Auto => select_conv_variant(c_in, self.k),
            v => v,
        }
    }
}

/// Non-overlapping max pooling: the stride always equals `z_pool`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxPoolSpec {
    pub z_pool: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSpec {
    pub n_e: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[serde(rename = "relu")]
    ReLU,
    Sigmoid,
    Tanh,
    Softmax,
}

impl ActivationKind {
    pub fn is_relu(self) -> bool {
        self == ActivationKind::ReLU
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    #[serde(rename = "maxpool")]
    MaxPool(MaxPoolSpec),
    Dense(DenseSpec),
    Activation(ActivationSpec),
}

impl LayerSpec {
    pub fn conv(k: usize, z: usize, s: usize, p: usize) -> Self {
        LayerSpec::Conv2d(ConvSpec::new(k, z, s, p))
    }

    pub fn maxpool(z_pool: usize) -> Self {
        LayerSpec::MaxPool(MaxPoolSpec { z_pool })
    }

    pub fn dense(n_e: usize) -> Self {
        LayerSpec::Dense(DenseSpec { n_e })
    }

    pub fn activation(kind: ActivationKind) -> Self {
        LayerSpec::Activation(ActivationSpec { kind })
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::MaxPool(_) => "maxpool",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Activation(_) => "activation",
        }
    }

    fn check(&self, index: usize) -> Result<(), ArchError> {
        let bad = |reason: &str| Err(ArchError::InvalidLayer { index, reason: reason.to_string() });
        match *self {
            LayerSpec::Conv2d(c) => {
                if c.k == 0 {
                    return bad("k must be >= 1");
                }
                if c.z == 0 {
                    return bad("z must be >= 1");
                }
                if c.s == 0 {
                    return bad("s must be >= 1");
                }
                if c.p >= c.z {
                    return bad("padding must be smaller than the kernel side");
                }
            }
            LayerSpec::MaxPool(m) if m.z_pool < 2 => return bad("z_pool must be >= 2"),
            LayerSpec::Dense(d) if d.n_e == 0 => return bad("n_e must be >= 1"),
            _ => {}
        }
        Ok(())
    }

    /// Output shape for the given input shape.
    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape, ArchError> {
        match *self {
            LayerSpec::Conv2d(c) => Ok(TensorShape::new(conv_output_side(input.h, c.z, c.p, c.s)?, c.k)),
            LayerSpec::MaxPool(m) => {
                if m.z_pool < 2 || !input.h.is_multiple_of(m.z_pool) {
                    return Err(ArchError::DivisibilityError { h_in: input.h, z_pool: m.z_pool });
                }
                Ok(TensorShape::new(input.h / m.z_pool, input.c))
            }
            // flatten is implicit
            LayerSpec::Dense(d) => Ok(TensorShape::new(1, d.n_e)),
            LayerSpec::Activation(_) => Ok(input),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: TensorShape,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input: TensorShape, layers: Vec<LayerSpec>) -> Self {
        Self { input, layers }
    }

    /// Checks every field invariant and that shapes propagate through all layers.
    pub fn validate(&self) -> Result<(), ArchError> {
        if self.input.h == 0 || self.input.c == 0 {
            return Err(ArchError::InvalidLayer { index: 0, reason: "input shape must be >= 1".into() });
        }
        if self.layers.is_empty() {
            return Err(ArchError::Empty);
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.check(i + 1)?;
        }
        propagate_shapes(self).map(|_| ())
    }

    pub fn from_json(text: &str) -> Result<Self, ArchError> {
        let arch: Architecture = serde_json::from_str(text).map_err(|e| ArchError::Json(e.to_string()))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    /// Input shape seen by each layer.
    pub fn input_shapes(&self) -> Result<Vec<TensorShape>, ArchError> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        for l in &self.layers {
            shapes.push(cur);
            cur = l.output_shape(cur)?;
        }
        Ok(shapes)
    }
}

/// Output side of a square convolution. Exact division is required.
pub fn conv_output_side(h_in: usize, z: usize, p: usize, s: usize) -> Result<usize, ArchError> {
    assert!(s >= 1, "stride must be >= 1");
    let span = (h_in + 2 * p).checked_sub(z).ok_or(ArchError::KernelTooLarge { h_in, z, p })?;
    if span % s != 0 {
        return Err(ArchError::NonIntegralShape { h_in, z, p, s });
    }
    Ok(span / s + 1)
}

/// Output shape of every layer, in order. An empty layer list echoes the input.
pub fn propagate_shapes(arch: &Architecture) -> Result<Vec<TensorShape>, ArchError> {
    if arch.layers.is_empty() {
        return Ok(vec![arch.input]);
    }
    let mut out = Vec::with_capacity(arch.layers.len());
    let mut cur = arch.input;
    for l in &arch.layers {
        cur = l.output_shape(cur)?;
        out.push(cur);
    }
    Ok(out)
}

/// Layer complexity. For pooling and activation layers the count is the
/// number of output elements and `is_mac` is false.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    pub count: u64,
    pub is_mac: bool,
}

pub fn mac_complexity(layer: &LayerSpec, in_shape: TensorShape) -> Result<MacCount, ArchError> {
    let out = layer.output_shape(in_shape)?;
    let (count, is_mac) = match *layer {
        LayerSpec::Conv2d(c) => {
            let per_output = (c.z * c.z * in_shape.c) as u64;
            (per_output * (out.h * out.h * c.k) as u64, true)
        }
        LayerSpec::Dense(d) => (in_shape.len() as u64 * d.n_e as u64, true),
        LayerSpec::MaxPool(_) | LayerSpec::Activation(_) => (out.len() as u64, false),
    };
    Ok(MacCount { count, is_mac })
}

/// Which CMSIS-NN convolution kernel handles a layer with these channel counts.
pub fn select_conv_variant(c_in: usize, c_out: usize) -> ConvVariant {
    if c_in.is_multiple_of(4) && c_out.is_multiple_of(2) {
        ConvVariant::Fast
    } else if c_in == 3 {
        ConvVariant::Rgb
    } else {
        ConvVariant::Basic
    }
}

/// One field-level difference between two architectures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArchDiff {
    /// 1-based layer index; `None` for whole-architecture fields.
    pub layer: Option<usize>,
    pub field: String,
    pub left: String,
    pub right: String,
}

impl fmt::Display for ArchDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(i) => write!(f, "layer {i}: {}: {} != {}", self.field, self.left, self.right),
            None => write!(f, "{}: {} != {}", self.field, self.left, self.right),
        }
    }
}

/// Structural comparison on the recoverable hyper-parameters.
///
/// Activations compare only on ReLU-vs-not, and convolution variants compare
/// on the kernel that would actually be dispatched.
pub fn diff(a: &Architecture, b: &Architecture) -> Vec<ArchDiff> {
    let mut out = Vec::new();
    let mut push = |layer: Option<usize>, field: &str, l: String, r: String| {
        if l != r {
            out.push(ArchDiff { layer, field: field.to_string(), left: l, right: r });
        }
    };
    push(None, "input", a.input.to_string(), b.input.to_string());
    push(None, "layers", a.layers.len().to_string(), b.layers.len().to_string());

    let shapes_a = a.input_shapes().unwrap_or_default();
    let shapes_b = b.input_shapes().unwrap_or_default();
    for (i, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        let idx = Some(i + 1);
        match (la, lb) {
            (LayerSpec::Conv2d(x), LayerSpec::Conv2d(y)) => {
                push(idx, "k", x.k.to_string(), y.k.to_string());
                push(idx, "z", x.z.to_string(), y.z.to_string());
                push(idx, "s", x.s.to_string(), y.s.to_string());
                push(idx, "p", x.p.to_string(), y.p.to_string());
                if let (Some(sa), Some(sb)) = (shapes_a.get(i), shapes_b.get(i)) {
                    push(
                        idx,
                        "variant",
                        format!("{:?}", x.resolved_variant(sa.c)),
                        format!("{:?}", y.resolved_variant(sb.c)),
                    );
                }
            }
            (LayerSpec::MaxPool(x), LayerSpec::MaxPool(y)) => {
                push(idx, "z_pool", x.z_pool.to_string(), y.z_pool.to_string());
            }
            (LayerSpec::Dense(x), LayerSpec::Dense(y)) => {
                push(idx, "n_e", x.n_e.to_string(), y.n_e.to_string());
            }
            (LayerSpec::Activation(x), LayerSpec::Activation(y)) => {
                let name = |k: ActivationKind| if k.is_relu() { "relu" } else { "not-relu" };
                push(idx, "relu", name(x.kind).into(), name(y.kind).into());
            }
            _ => push(idx, "type", la.type_name().into(), lb.type_name().into()),
        }
    }
    out
}

/// Reference models (MNIST MLP, MNIST CNN, Cifar-10 CNN and the
/// remainder-exercising SP-MLP).
pub mod fixtures {
    use super::*;
    use ActivationKind::*;

    fn act(kind: ActivationKind) -> LayerSpec {
        LayerSpec::activation(kind)
    }

    pub fn mnist_mlp() -> Architecture {
        Architecture::new(
            TensorShape::new(28, 1),
            vec![LayerSpec::dense(32), act(ReLU), LayerSpec::dense(16), act(ReLU), LayerSpec::dense(10), act(Softmax)],
        )
    }

    pub fn mnist_cnn() -> Architecture {
        Architecture::new(
            TensorShape::new(28, 1),
            vec![
                LayerSpec::conv(16, 3, 1, 1),
                act(ReLU),
                LayerSpec::maxpool(2),
                LayerSpec::conv(32, 3, 1, 1),
                act(ReLU),
                LayerSpec::maxpool(2),
                LayerSpec::dense(16),
                act(Softmax),
            ],
        )
    }

    pub fn cifar10_cnn() -> Architecture {
        Architecture::new(
            TensorShape::new(32, 3),
            vec![
                LayerSpec::conv(16, 3, 1, 1),
                act(ReLU),
                LayerSpec::maxpool(2),
                LayerSpec::conv(32, 3, 1, 1),
                act(ReLU),
                LayerSpec::maxpool(2),
                LayerSpec::conv(64, 3, 1, 1),
                act(ReLU),
                LayerSpec::maxpool(2),
                LayerSpec::dense(32),
                act(ReLU),
                LayerSpec::dense(10),
                act(Softmax),
            ],
        )
    }

    pub fn sp_mlp() -> Architecture {
        Architecture::new(
            TensorShape::new(28, 1),
            vec![
                LayerSpec::dense(23),
                act(ReLU),
                LayerSpec::dense(18),
                act(ReLU),
                LayerSpec::dense(13),
                act(ReLU),
                LayerSpec::dense(10),
                act(Softmax),
            ],
        )
    }

    pub fn by_name(name: &str) -> Option<Architecture> {
        match name {
            "mnist_mlp" => Some(mnist_mlp()),
            "mnist_cnn" => Some(mnist_cnn()),
            "cifar10_cnn" => Some(cifar10_cnn()),
            "sp_mlp" => Some(sp_mlp()),
            _ => None,
        }
    }

    pub const NAMES: [&str; 4] = ["mnist_mlp", "mnist_cnn", "cifar10_cnn", "sp_mlp"];
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn conv_output_side_examples() {
        assert_eq!(conv_output_side(28, 3, 1, 1), Ok(28));
        assert_eq!(conv_output_side(17, 1, 0, 1), Ok(17));
        assert_eq!(conv_output_side(32, 5, 0, 3), Ok(10));
        assert!(matches!(conv_output_side(32, 5, 0, 2), Err(ArchError::NonIntegralShape { .. })));
        assert!(matches!(conv_output_side(2, 5, 1, 1), Err(ArchError::KernelTooLarge { .. })));
    }

    #[test]
    fn propagate_examples() {
        let a = Architecture::new(TensorShape::new(28, 1), vec![LayerSpec::conv(16, 3, 1, 1)]);
        assert_eq!(propagate_shapes(&a).unwrap(), vec![TensorShape::new(28, 16)]);
        let a = Architecture::new(TensorShape::new(32, 16), vec![LayerSpec::maxpool(2)]);
        assert_eq!(propagate_shapes(&a).unwrap(), vec![TensorShape::new(16, 16)]);
        let a = Architecture::new(TensorShape::new(5, 2), vec![]);
        assert_eq!(propagate_shapes(&a).unwrap(), vec![TensorShape::new(5, 2)]);
        let a = Architecture::new(TensorShape::new(7, 16), vec![LayerSpec::maxpool(2)]);
        assert!(matches!(propagate_shapes(&a), Err(ArchError::DivisibilityError { .. })));
    }

    #[test]
    fn fixture_shapes() {
        let s = |h, c| TensorShape::new(h, c);
        assert_eq!(
            propagate_shapes(&fixtures::mnist_cnn()).unwrap(),
            vec![s(28, 16), s(28, 16), s(14, 16), s(14, 32), s(14, 32), s(7, 32), s(1, 16), s(1, 16)]
        );
        assert_eq!(
            propagate_shapes(&fixtures::cifar10_cnn()).unwrap(),
            vec![
                s(32, 16),
                s(32, 16),
                s(16, 16),
                s(16, 32),
                s(16, 32),
                s(8, 32),
                s(8, 64),
                s(8, 64),
                s(4, 64),
                s(1, 32),
                s(1, 32),
                s(1, 10),
                s(1, 10)
            ]
        );
        assert_eq!(
            propagate_shapes(&fixtures::mnist_mlp()).unwrap(),
            vec![s(1, 32), s(1, 32), s(1, 16), s(1, 16), s(1, 10), s(1, 10)]
        );
        for name in fixtures::NAMES {
            fixtures::by_name(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn mac_examples() {
        let cnn = fixtures::mnist_cnn();
        let mlp = fixtures::mnist_mlp();
        let conv = mac_complexity(&cnn.layers[0], cnn.input).unwrap();
        let dense = mac_complexity(&mlp.layers[0], mlp.input).unwrap();
        assert_eq!(conv, MacCount { count: 112_896, is_mac: true });
        assert_eq!(dense.count, 25_088);
        assert!((conv.count as f64 / dense.count as f64 - 4.5).abs() < 1e-12);
        let one = mac_complexity(&LayerSpec::dense(1), TensorShape::new(1, 1)).unwrap();
        assert_eq!(one.count, 1);
        let relu = mac_complexity(&LayerSpec::activation(ActivationKind::ReLU), TensorShape::new(28, 16)).unwrap();
        assert_eq!(relu, MacCount { count: 12_544, is_mac: false });
    }

    #[test]
    fn variant_selection() {
        assert_eq!(select_conv_variant(16, 32), ConvVariant::Fast);
        assert_eq!(select_conv_variant(3, 16), ConvVariant::Rgb);
        assert_eq!(select_conv_variant(1, 16), ConvVariant::Basic);
        assert_eq!(select_conv_variant(4, 3), ConvVariant::Basic);
        let mut c = ConvSpec::new(16, 3, 1, 1);
        c.variant = ConvVariant::Basic;
        assert_eq!(c.resolved_variant(16), ConvVariant::Basic);
    }

    #[test]
    fn json_schema() {
        let text = r#"{"input": {"h": 28, "c": 1}, "layers": [
            {"type": "conv2d", "k": 16, "z": 3, "s": 1, "p": 1},
            {"type": "activation", "kind": "relu"},
            {"type": "maxpool", "z_pool": 2},
            {"type": "dense", "n_e": 10}
        ]}"#;
        let a = Architecture::from_json(text).unwrap();
        assert_eq!(a.layers.len(), 4);
        assert_eq!(Architecture::from_json(&a.to_json()).unwrap(), a);

        let unknown = r#"{"input": {"h": 28, "c": 1}, "layers": [{"type": "dense", "n_e": 10, "bias": true}]}"#;
        assert!(matches!(Architecture::from_json(unknown), Err(ArchError::Json(_))));
        let bad_pad = r#"{"input": {"h": 28, "c": 1}, "layers": [{"type": "conv2d", "k": 4, "z": 3, "s": 1, "p": 3}]}"#;
        assert!(matches!(Architecture::from_json(bad_pad), Err(ArchError::InvalidLayer { .. })));
        let empty = r#"{"input": {"h": 28, "c": 1}, "layers": []}"#;
        assert_eq!(Architecture::from_json(empty), Err(ArchError::Empty));
    }

    #[test]
    fn diff_lines() {
        let a = fixtures::mnist_cnn();
        assert!(diff(&a, &a).is_empty());
        let mut b = a.clone();
        b.layers[0] = LayerSpec::conv(32, 3, 1, 1);
        let d = diff(&a, &b);
        // k changes and so does the dispatched kernel? c_in = 1 keeps it basic
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].to_string(), "layer 1: k: 16 != 32");
        let mut c = a.clone();
        c.layers[7] = LayerSpec::activation(ActivationKind::Sigmoid);
        assert!(diff(&a, &c).is_empty());
    }

    proptest! {
        #[test]
        fn conv_side_resubstitution(h_in in 1usize..80, z in 1usize..8, p in 0usize..8, s in 1usize..9) {
            prop_assume!(p < z);
            match conv_output_side(h_in, z, p, s) {
                Ok(h_out) => prop_assert_eq!((h_out - 1) * s + z, h_in + 2 * p),
                Err(ArchError::NonIntegralShape { .. }) => prop_assert!((h_in + 2 * p - z) % s != 0),
                Err(ArchError::KernelTooLarge { .. }) => prop_assert!(h_in + 2 * p < z),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn variant_selection_total(c_in in 1usize..512, c_out in 1usize..512) {
            prop_assert_eq!(select_conv_variant(c_in, c_out), select_conv_variant(c_in, c_out));
        }
    }
}
