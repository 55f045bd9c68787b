//! Symbolic walk of the CMSIS-NN kernels.
//!
//! Each `emulate_*` function reproduces the loop nest of the corresponding
//! CMSIS-NN routine and records every iteration as a timed [`EventNode`].
//! No arithmetic is performed: only the loop structure, which is data
//! oblivious, is modelled.

mod render;

pub use render::{render_trace, RenderError, RenderParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{
    ActivationKind, ActivationSpec, ArchError, Architecture, ConvSpec, DenseSpec, LayerSpec, MaxPoolSpec, TensorShape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventClass {
    Im2colColumn,
    GemmCall,
    /// One `rowCnt` iteration of the GeMM kernel (two output channels).
    GemmKernelPair,
    /// One `colCnt` iteration (four SIMD multiply-accumulates).
    SimdMacGroup,
    GemmRemainder,
    PoolXStep,
    PoolYStep,
    DenseNeuronGroup,
    DenseMacGroup,
    DenseRemainderNeuron,
    ActReluElem,
    ActSigmoidElem,
    ActTanhElem,
    LayerGap,
}

impl EventClass {
    pub const ALL: [EventClass; 14] = [
        EventClass::Im2colColumn,
        EventClass::GemmCall,
        EventClass::GemmKernelPair,
        EventClass::SimdMacGroup,
        EventClass::GemmRemainder,
        EventClass::PoolXStep,
        EventClass::PoolYStep,
        EventClass::DenseNeuronGroup,
        EventClass::DenseMacGroup,
        EventClass::DenseRemainderNeuron,
        EventClass::ActReluElem,
        EventClass::ActSigmoidElem,
        EventClass::ActTanhElem,
        EventClass::LayerGap,
    ];

    pub fn for_activation(kind: ActivationKind) -> Self {
        match kind {
            ActivationKind::ReLU => EventClass::ActReluElem,
            ActivationKind::Tanh => EventClass::ActTanhElem,
            // softmax shares the exponential-heavy cost class
            ActivationKind::Sigmoid | ActivationKind::Softmax => EventClass::ActSigmoidElem,
        }
    }
}

/// A timed event. Times are in microseconds from the start of the inference.
///
/// A composite node spends `preamble` µs on its own work (loop set-up,
/// accumulator initialisation) before its children run back to back, so
/// `duration == preamble + Σ children.duration` at every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventNode {
    pub label: String,
    /// `None` for structural composites (root, layers, pooling blocks).
    pub class: Option<EventClass>,
    pub start: f64,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub preamble: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<EventNode>,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl EventNode {
    pub fn leaf(label: impl Into<String>, class: EventClass, duration: f64) -> Self {
        Self { label: label.into(), class: Some(class), start: 0.0, duration, preamble: 0.0, children: Vec::new() }
    }

    pub fn composite(
        label: impl Into<String>,
        class: Option<EventClass>,
        preamble: f64,
        children: Vec<EventNode>,
    ) -> Self {
        let duration = preamble + children.iter().map(|c| c.duration).sum::<f64>();
        let mut node = Self { label: label.into(), class, start: 0.0, duration, preamble, children };
        node.place(0.0);
        node
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty() && self.preamble == 0.0
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// Moves the subtree so that it starts at `start`.
    pub fn place(&mut self, start: f64) {
        self.start = start;
        let mut t = start + self.preamble;
        for c in &mut self.children {
            c.place(t);
            t += c.duration;
        }
    }

    /// Number of nodes of `class` anywhere in the subtree (including self).
    pub fn count_class(&self, class: EventClass) -> usize {
        let own = usize::from(self.class == Some(class));
        own + self.children.iter().map(|c| c.count_class(class)).sum::<usize>()
    }

    /// Direct children of `class`.
    pub fn children_of(&self, class: EventClass) -> impl Iterator<Item = &EventNode> {
        self.children.iter().filter(move |c| c.class == Some(class))
    }

    /// Depth-first visit of every node.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a EventNode)) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }

    /// Shortest timed span that renders on its own: leaves and composite preambles.
    pub fn shortest_span(&self) -> f64 {
        let mut best = f64::INFINITY;
        self.visit(&mut |n| {
            if n.children.is_empty() {
                best = best.min(n.duration);
            } else if n.preamble > 0.0 {
                best = best.min(n.preamble);
            }
        });
        best
    }

    /// True when every node's children tile its span after the preamble.
    pub fn is_additive(&self, tol: f64) -> bool {
        if self.children.is_empty() {
            return true;
        }
        let mut t = self.start + self.preamble;
        for c in &self.children {
            if (c.start - t).abs() > tol || !c.is_additive(tol) {
                return false;
            }
            t += c.duration;
        }
        (t - self.end()).abs() <= tol
    }
}

#[derive(Debug, Error)]
pub enum EmulateError {
    #[error(transparent)]
    Shape(#[from] ArchError),
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
}

/// Durations in microseconds.
///
/// Remainder leaves stand for a short inner loop, so their duration is the
/// unit cost here multiplied by the loop length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub im2col_column: f64,
    pub simd_mac_group: f64,
    pub gemm_remainder: f64,
    pub kernel_pair_overhead: f64,
    pub pool_x_step: f64,
    pub pool_y_step: f64,
    pub pool_block_gap: f64,
    pub dense_mac_group: f64,
    pub neuron_group_overhead: f64,
    pub dense_remainder_mac: f64,
    pub act_relu: f64,
    pub act_tanh: f64,
    pub act_sigmoid: f64,
    pub layer_gap: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            im2col_column: 0.5,
            simd_mac_group: 0.25,
            gemm_remainder: 0.35,
            kernel_pair_overhead: 0.1,
            pool_x_step: 0.2,
            pool_y_step: 1.0,
            pool_block_gap: 2.0,
            dense_mac_group: 0.25,
            neuron_group_overhead: 0.1,
            dense_remainder_mac: 0.15,
            act_relu: 0.05,
            act_tanh: 0.4,
            act_sigmoid: 0.8,
            layer_gap: 50.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), EmulateError> {
        let fields = [
            ("im2col_column", self.im2col_column),
            ("simd_mac_group", self.simd_mac_group),
            ("gemm_remainder", self.gemm_remainder),
            ("kernel_pair_overhead", self.kernel_pair_overhead),
            ("pool_x_step", self.pool_x_step),
            ("pool_y_step", self.pool_y_step),
            ("pool_block_gap", self.pool_block_gap),
            ("dense_mac_group", self.dense_mac_group),
            ("neuron_group_overhead", self.neuron_group_overhead),
            ("dense_remainder_mac", self.dense_remainder_mac),
            ("act_relu", self.act_relu),
            ("act_tanh", self.act_tanh),
            ("act_sigmoid", self.act_sigmoid),
            ("layer_gap", self.layer_gap),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(EmulateError::InvalidCost(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.act_relu < self.act_tanh && self.act_tanh < self.act_sigmoid) {
            return Err(EmulateError::InvalidCost("activation costs must satisfy relu < tanh < sigmoid".into()));
        }
        Ok(())
    }

    /// Per-element cost of an activation.
    pub fn activation(&self, kind: ActivationKind) -> f64 {
        match EventClass::for_activation(kind) {
            EventClass::ActReluElem => self.act_relu,
            EventClass::ActTanhElem => self.act_tanh,
            _ => self.act_sigmoid,
        }
    }
}

/// im2col + GeMM convolution (`arm_convolve_HWC_q7_*`).
///
/// Columns are buffered two at a time; each full buffer triggers one GeMM
/// call that iterates over kernel pairs (`rowCnt = K/2`) and, inside each
/// pair, over groups of four MACs (`colCnt = C_in·Z²/4`).
pub fn emulate_conv(spec: &ConvSpec, in_shape: TensorShape, cost: &CostModel) -> Result<EventNode, EmulateError> {
    let h_out = crate::arch::conv_output_side(in_shape.h, spec.z, spec.p, spec.s)?;
    let depth = in_shape.c * spec.z * spec.z;
    let col_cnt = depth / 4;
    let depth_rem = depth % 4;
    let pairs = spec.k / 2;
    let depth_blocks = depth.div_ceil(4).max(1);

    let pair = {
        let mut leaves: Vec<EventNode> =
            (0..col_cnt).map(|_| EventNode::leaf("simd_mac", EventClass::SimdMacGroup, cost.simd_mac_group)).collect();
        if depth_rem != 0 {
            leaves.push(EventNode::leaf("mac_remainder", EventClass::GemmRemainder, cost.gemm_remainder));
        }
        EventNode::composite("kernel_pair", Some(EventClass::GemmKernelPair), cost.kernel_pair_overhead, leaves)
    };
    let im2col = EventNode::leaf("im2col", EventClass::Im2colColumn, cost.im2col_column);

    let call = {
        let mut children = vec![im2col.clone(), im2col.clone()];
        children.extend(std::iter::repeat_n(pair, pairs));
        if spec.k % 2 == 1 {
            children.push(EventNode::leaf(
                "kernel_remainder",
                EventClass::GemmRemainder,
                cost.gemm_remainder * depth_blocks as f64,
            ));
        }
        EventNode::composite("gemm", Some(EventClass::GemmCall), 0.0, children)
    };

    let columns = h_out * h_out;
    let mut calls: Vec<EventNode> = std::iter::repeat_n(call, columns / 2).collect();
    if columns % 2 == 1 {
        let leftover = EventNode::leaf(
            "column_remainder",
            EventClass::GemmRemainder,
            cost.gemm_remainder * (spec.k.div_ceil(2) * depth_blocks) as f64,
        );
        calls.push(EventNode::composite(
            "gemm_remainder_column",
            Some(EventClass::GemmCall),
            0.0,
            vec![im2col, leftover],
        ));
    }

    let variant = spec.resolved_variant(in_shape.c);
    let label = format!("conv2d k={} z={} s={} p={} ({:?})", spec.k, spec.z, spec.s, spec.p, variant).to_lowercase();
    Ok(EventNode::composite(label, None, 0.0, calls))
}

/// `arm_maxpool_q7_HWC`: an x-axis pass over `H_in × H_out` windows, then a
/// y-axis pass over `H_out` rows.
pub fn emulate_maxpool(spec: &MaxPoolSpec, in_shape: TensorShape, cost: &CostModel) -> Result<EventNode, EmulateError> {
    let out = LayerSpec::MaxPool(*spec).output_shape(in_shape)?;
    let x_steps = (0..in_shape.h * out.h).map(|_| EventNode::leaf("pool_x", EventClass::PoolXStep, cost.pool_x_step));
    let y_steps = (0..out.h).map(|_| EventNode::leaf("pool_y", EventClass::PoolYStep, cost.pool_y_step));
    let blocks = vec![
        EventNode::composite("pool_x_pass", None, 0.0, x_steps.collect()),
        EventNode::leaf("pool_pass_gap", EventClass::LayerGap, cost.pool_block_gap),
        EventNode::composite("pool_y_pass", None, 0.0, y_steps.collect()),
    ];
    Ok(EventNode::composite(format!("maxpool z_pool={}", spec.z_pool), None, 0.0, blocks))
}

/// `arm_fully_connected_q7_opt`: neurons in groups of four, then the
/// `N_e mod 4` leftovers one by one.
pub fn emulate_dense(spec: &DenseSpec, in_len: usize, cost: &CostModel) -> EventNode {
    let col_cnt = in_len / 4;
    let group = EventNode::composite(
        "neuron_group",
        Some(EventClass::DenseNeuronGroup),
        cost.neuron_group_overhead,
        (0..col_cnt).map(|_| EventNode::leaf("dense_mac", EventClass::DenseMacGroup, cost.dense_mac_group)).collect(),
    );
    let rem = EventNode::leaf(
        "remainder_neuron",
        EventClass::DenseRemainderNeuron,
        cost.dense_remainder_mac * col_cnt.max(1) as f64,
    );
    let mut children: Vec<EventNode> = std::iter::repeat_n(group, spec.n_e / 4).collect();
    children.extend(std::iter::repeat_n(rem, spec.n_e % 4));
    EventNode::composite(format!("dense n_e={}", spec.n_e), None, 0.0, children)
}

pub fn emulate_activation(spec: &ActivationSpec, n_elems: usize, cost: &CostModel) -> EventNode {
    let class = EventClass::for_activation(spec.kind);
    let per = cost.activation(spec.kind);
    let leaves = (0..n_elems).map(|_| EventNode::leaf("act", class, per)).collect();
    EventNode::composite(format!("activation {:?}", spec.kind).to_lowercase(), None, 0.0, leaves)
}

/// Whole inference: one composite per layer, separated by gap events.
pub fn emulate_inference(arch: &Architecture, cost: &CostModel) -> Result<EventNode, EmulateError> {
    cost.validate()?;
    arch.validate()?;
    let shapes = arch.input_shapes()?;
    let mut children = Vec::with_capacity(2 * arch.layers.len());
    for (i, (layer, &shape)) in arch.layers.iter().zip(&shapes).enumerate() {
        if i > 0 {
            children.push(EventNode::leaf("layer_gap", EventClass::LayerGap, cost.layer_gap));
        }
        let mut node = match layer {
            LayerSpec::Conv2d(c) => emulate_conv(c, shape, cost)?,
            LayerSpec::MaxPool(m) => emulate_maxpool(m, shape, cost)?,
            LayerSpec::Dense(d) => emulate_dense(d, shape.len(), cost),
            LayerSpec::Activation(a) => emulate_activation(a, shape.len(), cost),
        };
        node.label = format!("L{} {}", i + 1, node.label);
        children.push(node);
    }
    Ok(EventNode::composite("inference", None, 0.0, children))
}

/// The per-layer composites of an inference tree, in order.
pub fn layer_nodes(root: &EventNode) -> impl Iterator<Item = &EventNode> {
    root.children.iter().filter(|c| c.class != Some(EventClass::LayerGap))
}
