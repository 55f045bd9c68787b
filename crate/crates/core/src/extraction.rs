//! Blind architecture recovery from a trace.
//!
//! The pipeline splits the trace into layers at long silences, classifies
//! each layer, and inverts nested pattern counts into hyper-parameters,
//! propagating the recovered shape from one layer to the next.
//!
//! Bursts inside a layer are typed against a calibration: the amplitude and
//! carrier period each event class produces on the target, measured once by
//! rendering isolated events with the calibration cost model.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{conv_output_side, ActivationKind, Architecture, DenseSpec, LayerSpec, MaxPoolSpec, TensorShape};
use crate::emulator::{render_trace, CostModel, EventClass, EventNode, RenderParams};
use crate::signal::{self, envelope_of, prominent_peaks, Baseline, Segment, SegmentParams, SignalError};
use crate::trace::Trace;

/// Largest stride considered when solving for stride and padding.
pub const MAX_STRIDE: usize = 8;
/// Largest kernel side considered when inverting the MAC-group count.
pub const MAX_KERNEL_SIDE: usize = 15;

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExtractError {
    #[error("no activity detected")]
    NoActivityDetected,
    #[error("kernel side is ambiguous: {count} MAC groups fit z = {candidates:?}")]
    AmbiguousKernelSize { count: usize, candidates: Vec<usize> },
    #[error("inconsistent counts: {0}")]
    InconsistentCounts(String),
    #[error("no (stride, padding) gives {h_in} -> {h_out} with z = {z}")]
    NoSolution { h_in: usize, h_out: usize, z: usize },
    #[error("several (stride, padding) pairs fit: {0:?}")]
    MultipleSolutions(Vec<(usize, usize)>),
    #[error("max-pool sub-blocks not found")]
    BlocksNotFound,
    #[error("no periodic pattern found")]
    NoPeriodicity,
    #[error("signal: {0}")]
    Signal(String),
}

impl From<SignalError> for ExtractError {
    fn from(e: SignalError) -> Self {
        match e {
            SignalError::NoActivityDetected => ExtractError::NoActivityDetected,
            SignalError::NoPeriodicity { .. } => ExtractError::NoPeriodicity,
            other => ExtractError::Signal(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Dense,
    MaxPool,
    Activation,
    Unknown,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Sigmoid and Tanh are not told apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationClass {
    ReLU,
    SigmoidOrTanh,
}

/// Recovered hyper-parameters; only the fields relevant to the kind are set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_e: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_pool: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationClass>,
}

impl LayerParams {
    /// The layer spec these parameters describe, if complete.
    pub fn to_spec(&self, kind: LayerKind) -> Option<LayerSpec> {
        Some(match kind {
            LayerKind::Conv => LayerSpec::conv(self.k?, self.z?, self.s?, self.p?),
            LayerKind::Dense => LayerSpec::Dense(DenseSpec { n_e: self.n_e? }),
            LayerKind::MaxPool => LayerSpec::MaxPool(MaxPoolSpec { z_pool: self.z_pool? }),
            LayerKind::Activation => LayerSpec::activation(match self.activation? {
                ActivationClass::ReLU => ActivationKind::ReLU,
                ActivationClass::SigmoidOrTanh => ActivationKind::Sigmoid,
            }),
            LayerKind::Unknown => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHypothesis {
    pub kind: LayerKind,
    pub params: LayerParams,
    /// Raw counts each parameter was derived from.
    pub pattern_counts: BTreeMap<String, usize>,
    pub confidence: f64,
    pub segment: Segment,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<ExtractError>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl LayerHypothesis {
    fn new(kind: LayerKind, segment: Segment) -> Self {
        Self {
            kind,
            params: LayerParams::default(),
            pattern_counts: BTreeMap::new(),
            confidence: 0.0,
            segment,
            errors: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn count(&mut self, level: &str, n: usize) {
        self.pattern_counts.insert(level.to_string(), n);
    }

    fn fail(mut self, e: ExtractError) -> Self {
        self.confidence = 0.0;
        self.errors.push(e);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Durations the target is assumed to spend per event class.
    pub cost: CostModel,
    /// Amplitude and carrier per event class on the target.
    pub render: RenderParams,
    pub segment: SegmentParams,
    pub coarse_window: usize,
    pub coarse_hop: usize,
    pub fine_window: usize,
    /// Hypotheses below this confidence leave the layer unresolved.
    pub confidence_floor: f64,
    /// Per-element ReLU/non-ReLU boundary in µs; defaults to the geometric
    /// mean of the ReLU and Tanh costs.
    pub relu_cutoff_us: Option<f64>,
    /// Dense group periods shorter than this (µs) are not reliably countable.
    pub dense_period_floor_us: f64,
    /// SNR (weakest class amplitude over noise RMS) giving full confidence.
    pub snr_full: f64,
    /// Allowed relative spread of inter-layer silences.
    pub gap_tolerance: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            cost: CostModel::default(),
            render: RenderParams::default(),
            segment: SegmentParams::default(),
            coarse_window: 256,
            coarse_hop: 128,
            fine_window: 8,
            confidence_floor: 0.5,
            relu_cutoff_us: None,
            dense_period_floor_us: 4.0,
            snr_full: 10.0 / 3.0,
            gap_tolerance: 0.2,
        }
    }
}

impl ExtractionConfig {
    pub fn relu_cutoff(&self) -> f64 {
        self.relu_cutoff_us.unwrap_or_else(|| (self.cost.act_relu * self.cost.act_tanh).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    /// Noise RMS measured in silence.
    pub sigma: f64,
    /// Weakest class amplitude over `sigma`.
    pub snr: f64,
    /// Multiplier applied to every confidence.
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub hypotheses: Vec<LayerHypothesis>,
    /// Present only when every layer is resolved.
    pub recovered: Option<Architecture>,
    /// Architecture assembled from every hypothesis regardless of confidence.
    pub best_guess: Option<Architecture>,
    pub resolved: bool,
    pub prior_used: Vec<String>,
    pub errors: Vec<ExtractError>,
    pub noise: Option<NoiseEstimate>,
    pub input_shape: TensorShape,
    pub config: ExtractionConfig,
}

/// Measured amplitude and carrier of one event class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSignature {
    pub class: EventClass,
    pub amplitude: f64,
    pub period: f64,
}

/// A contiguous burst of activity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Burst {
    pub start: usize,
    pub end: usize,
    pub amplitude: f64,
    /// Carrier period in samples, 0 when too short to tell.
    pub period: f64,
}

impl Burst {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Finds envelope bumps in `samples` and measures each one's amplitude and
/// carrier. Indices are offset by `offset`.
pub fn find_bursts(samples: &[f32], offset: usize, window: usize, sigma: f64) -> Vec<Burst> {
    let Ok(env) = envelope_of(samples, window, 1) else { return Vec::new() };
    let floor = sigma * (1.0 + 6.0 / (2.0 * window as f64).sqrt()) + 1e-9;
    let peaks: Vec<_> = prominent_peaks(&env, 0.5).into_iter().filter(|b| b.height > floor).collect();
    let half = window / 2;
    let mut out = Vec::with_capacity(peaks.len());
    for (k, pk) in peaks.iter().enumerate() {
        let lo = if k == 0 { 0 } else { peaks[k - 1].index + 1 };
        let hi = peaks.get(k + 1).map_or(env.len(), |n| n.index);
        let cut = 0.5 * pk.height;
        let mut l = pk.index;
        while l > lo && env[l - 1] >= cut {
            l -= 1;
        }
        let mut r = pk.index + 1;
        while r < hi && env[r] >= cut {
            r += 1;
        }
        let (a, b) = ((l + half).min(samples.len()), (r + half).min(samples.len()));
        if b <= a {
            continue;
        }
        let core = &samples[a..b];
        let power = core.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / core.len() as f64;
        let amplitude = (2.0 * (power - sigma * sigma).max(power * 0.01)).sqrt();
        out.push(Burst { start: offset + a, end: offset + b, amplitude, period: carrier_period(core, amplitude) });
    }
    out
}

/// Mean distance between same-direction zero crossings, with hysteresis.
fn carrier_period(x: &[f32], amplitude: f64) -> f64 {
    let h = (0.3 * amplitude) as f32;
    let mut state = 0i8;
    let mut rises = Vec::new();
    for (i, &v) in x.iter().enumerate() {
        if v > h && state <= 0 {
            if state < 0 {
                rises.push(i);
            }
            state = 1;
        } else if v < -h {
            state = -1;
        }
    }
    if rises.len() < 2 {
        0.0
    } else {
        (rises[rises.len() - 1] - rises[0]) as f64 / (rises.len() - 1) as f64
    }
}

const CONV_CLASSES: [EventClass; 4] =
    [EventClass::Im2colColumn, EventClass::GemmKernelPair, EventClass::SimdMacGroup, EventClass::GemmRemainder];
const DENSE_CLASSES: [EventClass; 3] =
    [EventClass::DenseNeuronGroup, EventClass::DenseMacGroup, EventClass::DenseRemainderNeuron];
const POOL_CLASSES: [EventClass; 2] = [EventClass::PoolXStep, EventClass::PoolYStep];
const ACT_CLASSES: [EventClass; 3] = [EventClass::ActReluElem, EventClass::ActTanhElem, EventClass::ActSigmoidElem];

fn family(class: EventClass) -> LayerKind {
    if CONV_CLASSES.contains(&class) {
        LayerKind::Conv
    } else if DENSE_CLASSES.contains(&class) {
        LayerKind::Dense
    } else if POOL_CLASSES.contains(&class) {
        LayerKind::MaxPool
    } else if ACT_CLASSES.contains(&class) {
        LayerKind::Activation
    } else {
        LayerKind::Unknown
    }
}

/// Conv event counts per output column pair, in the emulator's loop order.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ConvParse {
    full_calls: usize,
    leftover_call: bool,
    pairs_per_call: Vec<usize>,
    macs_per_pair: Vec<usize>,
    /// Remainder bursts after the last MAC group of a non-final pair.
    mid_pair_tails: Vec<usize>,
    /// Remainder bursts after the last pair of each call.
    call_tails: Vec<usize>,
}

fn parse_conv(classes: &[EventClass]) -> ConvParse {
    use EventClass::*;
    #[derive(Default)]
    struct Call {
        im2col: usize,
        pairs: Vec<(usize, usize)>,
        head_rem: usize,
    }
    let mut calls: Vec<Call> = Vec::new();
    let mut prev: Option<EventClass> = None;
    for &c in classes {
        match c {
            Im2colColumn => {
                if prev != Some(Im2colColumn) || calls.last().is_none_or(|k| k.im2col >= 2) {
                    calls.push(Call::default());
                }
                calls.last_mut().unwrap().im2col += 1;
            }
            GemmKernelPair => {
                if calls.is_empty() {
                    calls.push(Call::default());
                }
                calls.last_mut().unwrap().pairs.push((0, 0));
            }
            SimdMacGroup => {
                if let Some(p) = calls.last_mut().and_then(|k| k.pairs.last_mut()) {
                    p.0 += 1;
                }
            }
            GemmRemainder => {
                if let Some(k) = calls.last_mut() {
                    match k.pairs.last_mut() {
                        Some(p) => p.1 += 1,
                        None => k.head_rem += 1,
                    }
                }
            }
            _ => {}
        }
        prev = Some(c);
    }
    let mut out = ConvParse {
        full_calls: 0,
        leftover_call: false,
        pairs_per_call: Vec::new(),
        macs_per_pair: Vec::new(),
        mid_pair_tails: Vec::new(),
        call_tails: Vec::new(),
    };
    let n = calls.len();
    for (i, call) in calls.iter().enumerate() {
        if i + 1 == n && n > 1 && call.im2col == 1 && call.pairs.is_empty() {
            out.leftover_call = true;
            continue;
        }
        out.full_calls += 1;
        out.pairs_per_call.push(call.pairs.len());
        for (j, &(macs, rem)) in call.pairs.iter().enumerate() {
            out.macs_per_pair.push(macs);
            if j + 1 < call.pairs.len() {
                out.mid_pair_tails.push(rem);
            }
        }
        out.call_tails.push(call.pairs.last().map_or(call.head_rem, |p| p.1));
    }
    out
}

/// Most frequent value and the fraction of entries that differ from it.
fn majority(values: &[usize]) -> Option<(usize, f64)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_default() += 1;
    }
    let (&v, &n) = counts.iter().max_by_key(|(v, n)| (**n, std::cmp::Reverse(**v)))?;
    Some((v, 1.0 - n as f64 / values.len() as f64))
}

/// Kernel sides whose MAC-group count `floor(c_in·z²/4)` is closest to `count`.
pub fn kernel_side_candidates(c_in: usize, count: usize) -> Vec<usize> {
    let dist = |z: usize| (c_in * z * z / 4).abs_diff(count);
    let best = (1..=MAX_KERNEL_SIDE).map(dist).min().unwrap_or(0);
    (1..=MAX_KERNEL_SIDE).filter(|&z| dist(z) == best).collect()
}

/// Recovers `(stride, padding)` from the input side, output side and kernel
/// side, using `0 ≤ p < z` and `1 ≤ s ≤ MAX_STRIDE`.
///
/// For `h_out = 1` the stride is not constrained by the output shape, so
/// every admissible pair is reported as [`ExtractError::MultipleSolutions`].
pub fn solve_stride_padding(h_in: usize, h_out: usize, z: usize) -> Result<(usize, usize), ExtractError> {
    let mut found = Vec::new();
    for p in 0..z {
        let Some(span) = (h_in + 2 * p).checked_sub(z) else { continue };
        if h_out == 1 {
            if span == 0 {
                found.extend((1..=MAX_STRIDE).map(|s| (s, p)));
            }
        } else if h_out >= 2 && span % (h_out - 1) == 0 {
            let s = span / (h_out - 1);
            if (1..=MAX_STRIDE).contains(&s) {
                found.push((s, p));
            }
        }
    }
    match found.len() {
        0 => Err(ExtractError::NoSolution { h_in, h_out, z }),
        1 => Ok(found[0]),
        _ => Err(ExtractError::MultipleSolutions(found)),
    }
}

/// Closed-form event durations used to score layer kinds.
mod durations {
    use super::CostModel;

    pub fn conv(c: &CostModel, c_in: usize, h_out: usize, k: usize, z: usize) -> f64 {
        let depth = c_in * z * z;
        let blocks = depth.div_ceil(4).max(1) as f64;
        let rem = if !depth.is_multiple_of(4) { c.gemm_remainder } else { 0.0 };
        let pair = c.kernel_pair_overhead + (depth / 4) as f64 * c.simd_mac_group + rem;
        let odd = if k % 2 == 1 { c.gemm_remainder * blocks } else { 0.0 };
        let call = 2.0 * c.im2col_column + (k / 2) as f64 * pair + odd;
        let cols = h_out * h_out;
        let leftover =
            if cols % 2 == 1 { c.im2col_column + c.gemm_remainder * (k.div_ceil(2) as f64) * blocks } else { 0.0 };
        (cols / 2) as f64 * call + leftover
    }

    pub fn dense(c: &CostModel, in_len: usize, n_e: usize) -> f64 {
        let col = in_len / 4;
        (n_e / 4) as f64 * (c.neuron_group_overhead + col as f64 * c.dense_mac_group)
            + (n_e % 4) as f64 * c.dense_remainder_mac * col.max(1) as f64
    }

    pub fn pool(c: &CostModel, h_in: usize, h_out: usize) -> f64 {
        (h_in * h_out) as f64 * c.pool_x_step + c.pool_block_gap + h_out as f64 * c.pool_y_step
    }
}

/// Stateful extractor for one trace.
pub struct Extractor<'a> {
    trace: &'a Trace,
    pub config: ExtractionConfig,
    pub noise: NoiseEstimate,
    signatures: Vec<ClassSignature>,
    /// Smallest calibrated class amplitude; anything well below it is noise.
    weakest: f64,
    coarse: Result<Vec<Segment>, ExtractError>,
}

impl<'a> Extractor<'a> {
    pub fn new(trace: &'a Trace, config: ExtractionConfig) -> Self {
        let signatures = calibrate(&config, trace.sample_rate);
        let coarse = coarse_segments(trace, &config);
        let noise = estimate_noise(trace, &config, coarse.as_deref().ok());
        let weakest = signatures.iter().map(|s| s.amplitude).fold(f64::INFINITY, f64::min);
        let weakest = if weakest.is_finite() { weakest } else { 0.0 };
        Self { trace, config, noise, signatures, weakest, coarse }
    }

    pub fn signatures(&self) -> &[ClassSignature] {
        &self.signatures
    }

    fn per_us(&self) -> f64 {
        self.trace.samples_per_us()
    }

    fn duration_us(&self, seg: Segment) -> f64 {
        seg.len() as f64 / self.per_us()
    }

    /// Layer segments in time order, with edges refined to sample accuracy.
    pub fn split_layers(&self) -> Result<Vec<Segment>, ExtractError> {
        let n = self.trace.len();
        let coarse = self.coarse.clone()?;

        let fw = self.config.fine_window.max(2);
        let thr = self.noise.sigma * (1.0 + 6.0 / (2.0 * fw as f64).sqrt()) + 1e-9;
        // Edges extend down to a lower hysteresis threshold.
        let low = self.noise.sigma * (1.0 + 1.0 / (2.0 * fw as f64).sqrt()) + 1e-9;
        let min_gap = (self.config.segment.min_gap_us * self.per_us()).round() as usize;
        // Each coarse segment is refined over the whole silence on either
        // side; runs seen from both neighbours are merged below.
        let mut runs: Vec<Segment> = Vec::new();
        for (i, seg) in coarse.iter().enumerate() {
            let lo = if i == 0 { 0 } else { coarse[i - 1].end.min(seg.start) };
            let hi = coarse.get(i + 1).map_or(n, |next| next.start.max(seg.end));
            let Ok(env) = envelope_of(&self.trace.samples[lo..hi], fw.min(hi - lo), 1) else { continue };
            // A wider window seeds weak but sustained activity.
            let ww = (4 * fw).min(hi - lo);
            let wide = envelope_of(&self.trace.samples[lo..hi], ww, 1).unwrap_or_default();
            let wide_thr = self.noise.sigma * (1.0 + 6.0 / (2.0 * ww as f64).sqrt()) + 1e-9;
            let mut k = 0;
            while k < env.len() {
                if env[k] <= low {
                    k += 1;
                    continue;
                }
                let a = k;
                while k < env.len() && env[k] > low {
                    k += 1;
                }
                let seeded = env[a..k].iter().any(|&v| v > thr)
                    || (a + ww <= k + fw)
                        .then(|| wide[a..=(k + fw - ww).min(wide.len() - 1)].iter().any(|&v| v > wide_thr))
                        == Some(true);
                if seeded {
                    runs.push(Segment::new(lo + a + fw / 2, (lo + k - 1 + fw / 2 + 1).min(hi)));
                }
            }
        }
        runs.sort_by_key(|r| r.start);
        // Silence shorter than min_gap does not separate layers.
        let mut merged: Vec<Segment> = Vec::new();
        for run in runs {
            match merged.last_mut() {
                Some(last) if run.start < last.end + min_gap => last.end = last.end.max(run.end),
                _ => merged.push(run),
            }
        }
        let overlaps = |r: &Segment| coarse.iter().any(|c| c.start < r.end && r.start < c.end);
        // Runs the coarse pass did not see must be long enough to rule out noise.
        merged.retain(|r| r.len() >= if overlaps(r) { fw / 2 } else { 2 * fw });
        for c in &coarse {
            if !merged.iter().any(|r| c.start < r.end && r.start < c.end) {
                merged.push(*c);
            }
        }
        merged.sort_by_key(|r| r.start);
        Ok(merged)
    }

    /// Bursts overlapping `seg`, analysed with a margin so edge bursts keep
    /// their surrounding silence.
    pub fn bursts(&self, seg: Segment) -> Vec<Burst> {
        let w = self.config.fine_window.max(2);
        let (a, b) = (seg.start.saturating_sub(6 * w), (seg.end + 6 * w).min(self.trace.len()));
        find_bursts(&self.trace.samples[a..b], a, w, self.noise.sigma)
            .into_iter()
            .filter(|x| x.end > seg.start && x.start < seg.end && x.amplitude >= 0.5 * self.weakest)
            .collect()
    }

    /// Nearest calibrated class among `candidates`, with its distance in
    /// ladder steps.
    pub fn classify_burst(&self, b: &Burst, candidates: &[EventClass]) -> (EventClass, f64) {
        let amp_step = (10f64.powf(2.5 / 20.0)).ln();
        self.signatures
            .iter()
            .filter(|s| candidates.contains(&s.class))
            .map(|s| {
                let da = (b.amplitude / s.amplitude).ln() / amp_step;
                let dp = if b.period > 0.0 && s.period > 0.0 { (b.period / s.period).ln() / 0.2 } else { 0.0 };
                (s.class, (da * da + dp * dp).sqrt())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((EventClass::LayerGap, f64::INFINITY))
    }

    fn typed(&self, seg: Segment, candidates: &[EventClass]) -> Vec<(Burst, EventClass)> {
        self.bursts(seg).into_iter().map(|b| (b, self.classify_burst(&b, candidates).0)).collect()
    }

    /// Layer kind from burst-class votes and duration plausibility, with the
    /// logical-order prior breaking near-ties.
    pub fn classify_layer(
        &self,
        seg: Segment,
        in_shape: Option<TensorShape>,
        prev: Option<LayerKind>,
    ) -> (LayerKind, f64, Option<String>) {
        let all: Vec<EventClass> = self.signatures.iter().map(|s| s.class).collect();
        let typed = self.typed(seg, &all);
        // Without bursts the vote is empty and duration alone decides.
        let total: f64 = typed.iter().map(|(b, _)| b.len() as f64).sum::<f64>().max(1.0);
        let kinds = [LayerKind::Conv, LayerKind::Dense, LayerKind::MaxPool, LayerKind::Activation];
        let vote = |k: LayerKind| {
            typed.iter().filter(|(_, c)| family(*c) == k).map(|(b, _)| b.len() as f64).sum::<f64>() / total
        };
        let d = self.duration_us(seg);
        let fit = |pred: f64| if pred > 0.0 { (-(d / pred).ln().abs() / 0.05).exp() } else { 0.0 };
        let c = &self.config.cost;
        let dur = |k: LayerKind| -> f64 {
            let Some(shape) = in_shape else { return 0.5 };
            match k {
                LayerKind::Activation => [c.act_relu, c.act_tanh, c.act_sigmoid]
                    .iter()
                    .map(|&e| fit(e * shape.len() as f64))
                    .fold(0.0, f64::max),
                LayerKind::MaxPool => (2..=shape.h)
                    .filter(|z| shape.h % z == 0)
                    .map(|z| fit(durations::pool(c, shape.h, shape.h / z)))
                    .fold(0.0, f64::max),
                LayerKind::Dense => {
                    let unit = durations::dense(c, shape.len(), 1).max(1e-9);
                    let guess = (d / unit * 4.0) as usize;
                    (guess.saturating_sub(8).max(1)..=guess + 8)
                        .map(|n| fit(durations::dense(c, shape.len(), n)))
                        .fold(0.0, f64::max)
                }
                LayerKind::Conv => {
                    let mut best = 0.0f64;
                    for z in 1..=7usize {
                        for p in 0..z {
                            for s in 1..=MAX_STRIDE {
                                let Ok(h) = conv_output_side(shape.h, z, p, s) else { continue };
                                let unit = durations::conv(c, shape.c, h, 2, z) / 2.0;
                                let guess = (d / unit.max(1e-9)) as usize;
                                for k in guess.saturating_sub(2).max(1)..=guess + 2 {
                                    best = best.max(fit(durations::conv(c, shape.c, h, k, z)));
                                }
                            }
                        }
                    }
                    best
                }
                LayerKind::Unknown => 0.0,
            }
        };
        // A flat or prime-sided input cannot be pooled.
        let feasible = |k: LayerKind| match (k, in_shape) {
            (LayerKind::MaxPool, Some(s)) => (2..=s.h).any(|z| s.h % z == 0),
            _ => true,
        };
        let mut scored: Vec<(LayerKind, f64)> =
            kinds.iter().map(|&k| (k, if feasible(k) { 0.7 * vote(k) + 0.3 * dur(k) } else { 0.0 })).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let (mut kind, mut score) = scored[0];
        let mut prior = None;
        if scored[0].1 - scored[1].1 < 0.05 {
            let expected: &[LayerKind] = match prev {
                Some(LayerKind::Conv) => &[LayerKind::Activation, LayerKind::MaxPool, LayerKind::Conv],
                Some(LayerKind::Dense) => &[LayerKind::Activation, LayerKind::Dense],
                _ => &[],
            };
            if let Some(&(k, s)) = scored[..2].iter().find(|(k, _)| expected.contains(k)) {
                if k != kind {
                    prior = Some(format!("{k} preferred over {kind} after {:?}", prev.unwrap()));
                }
                (kind, score) = (k, s);
            }
        }
        if score < 0.2 {
            return (LayerKind::Unknown, 0.0, prior);
        }
        (kind, score.min(1.0) * self.noise.factor, prior)
    }

    pub fn extract_conv(&self, seg: Segment, c_in: usize, h_in: usize) -> LayerHypothesis {
        let mut hyp = LayerHypothesis::new(LayerKind::Conv, seg);
        let classes: Vec<EventClass> = self.typed(seg, &CONV_CLASSES).into_iter().map(|(_, c)| c).collect();
        let parse = parse_conv(&classes);
        let columns = 2 * parse.full_calls + usize::from(parse.leftover_call);
        hyp.count("gemm_calls", parse.full_calls + usize::from(parse.leftover_call));
        if columns == 0 {
            return hyp.fail(ExtractError::NoPeriodicity);
        }
        let root = (columns as f64).sqrt();
        let h_out = root.round() as usize;
        let mut conf = 1.0f64;
        if (root - h_out as f64).abs() >= 0.05 {
            conf *= 0.3;
            hyp.notes.push(format!("{columns} output columns is not a square"));
        }

        let Some((pairs, pair_dis)) = majority(&parse.pairs_per_call) else {
            return hyp.fail(ExtractError::NoPeriodicity);
        };
        hyp.count("kernel_pairs_per_call", pairs);
        if pair_dis > 0.05 {
            hyp.errors.push(ExtractError::InconsistentCounts(format!(
                "{:.1}% of calls disagree on {pairs} kernel pairs",
                100.0 * pair_dis
            )));
            conf *= 0.3;
        }
        let (macs, mac_dis) = majority(&parse.macs_per_pair).unwrap_or((0, 0.0));
        if mac_dis > 0.05 {
            hyp.errors.push(ExtractError::InconsistentCounts(format!(
                "{:.1}% of kernel pairs disagree on {macs} MAC groups",
                100.0 * mac_dis
            )));
            conf *= 0.3;
        }
        let (tail, tail_dis) = majority(&parse.call_tails).unwrap_or((0, 0.0));
        hyp.count("trailing_remainders", tail);
        if tail_dis > 0.05 {
            conf *= 0.5;
        }

        hyp.params.h_out = Some(h_out);
        let z = if pairs == 0 {
            // Without kernel pairs no MAC groups are visible.
            conf *= 0.2;
            hyp.notes.push("no kernel pairs: kernel side unobservable".into());
            None
        } else {
            hyp.count("mac_groups_per_pair", macs);
            let cands = kernel_side_candidates(c_in, macs);
            if cands.len() != 1 {
                hyp.errors.push(ExtractError::AmbiguousKernelSize { count: macs, candidates: cands.clone() });
                conf = 0.0;
            } else if c_in * cands[0] * cands[0] / 4 != macs {
                conf *= 0.3;
            }
            cands.first().copied()
        };
        let depth_rem = z.map(|z| usize::from(!(c_in * z * z).is_multiple_of(4)));
        if let (Some(r), Some((mid, _))) = (depth_rem, majority(&parse.mid_pair_tails)) {
            if mid != r {
                conf *= 0.3;
                hyp.notes.push(format!("{mid} remainders per pair, expected {r}"));
            }
        }
        let odd = match depth_rem {
            Some(r) if tail >= r && tail - r <= 1 => tail - r,
            None if tail <= 1 => tail,
            _ => {
                conf *= 0.3;
                hyp.notes.push(format!("{tail} trailing remainders do not fit a kernel count"));
                0
            }
        };
        hyp.params.k = Some(2 * pairs + odd);
        if let Some(z) = z {
            hyp.params.z = Some(z);
            match solve_stride_padding(h_in, h_out, z) {
                Ok((s, p)) => {
                    hyp.params.s = Some(s);
                    hyp.params.p = Some(p);
                }
                Err(e) => {
                    if let ExtractError::MultipleSolutions(v) = &e {
                        hyp.params.s = Some(v[0].0);
                        hyp.params.p = Some(v[0].1);
                    }
                    hyp.errors.push(e);
                    conf = conf.min(0.3);
                }
            }
        }
        hyp.confidence = conf * self.noise.factor;
        hyp
    }

    pub fn extract_maxpool(&self, seg: Segment, h_in: usize) -> LayerHypothesis {
        let mut hyp = LayerHypothesis::new(LayerKind::MaxPool, seg);
        let typed = self.typed(seg, &POOL_CLASSES);
        let gap_min = 0.5 * self.config.cost.pool_block_gap * self.per_us();
        let split = typed
            .windows(2)
            .enumerate()
            .map(|(i, w)| (i + 1, w[1].0.start.saturating_sub(w[0].0.end)))
            .max_by_key(|&(_, g)| g)
            .filter(|&(_, g)| g as f64 >= gap_min);
        let Some((split, _)) = split else { return hyp.fail(ExtractError::BlocksNotFound) };
        let (x, y) = typed.split_at(split);
        hyp.count("block1_patterns", x.len());
        hyp.count("block2_patterns", y.len());
        let h_out = y.len();
        let mut conf = 1.0;
        if x.iter().any(|b| b.1 != EventClass::PoolXStep) || y.iter().any(|b| b.1 != EventClass::PoolYStep) {
            conf *= 0.5;
        }
        if x.len() != h_in * h_out {
            conf *= 0.3;
            hyp.notes.push(format!("first block has {} patterns, expected {}", x.len(), h_in * h_out));
        }
        if h_out == 0 || !h_in.is_multiple_of(h_out) {
            conf *= 0.2;
            hyp.notes.push(format!("input side {h_in} is not a multiple of {h_out}"));
        }
        hyp.params.h_out = Some(h_out);
        hyp.params.z_pool = Some((h_in as f64 / h_out.max(1) as f64).round() as usize);
        hyp.confidence = conf * self.noise.factor;
        hyp
    }

    pub fn extract_dense(&self, seg: Segment, in_len: usize) -> LayerHypothesis {
        use EventClass::*;
        let mut hyp = LayerHypothesis::new(LayerKind::Dense, seg);
        let typed = self.typed(seg, &DENSE_CLASSES);
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut trailing = 0usize;
        let mut stray = 0usize;
        let remainder_len = 0.6 * self.config.cost.dense_remainder_mac * (in_len / 4).max(1) as f64 * self.per_us();
        for (b, c) in &typed {
            match c {
                DenseNeuronGroup => {
                    groups.push((b.start, 0));
                    trailing = 0;
                }
                DenseMacGroup => match groups.last_mut() {
                    Some(g) if trailing == 0 => g.1 += 1,
                    _ => stray += 1,
                },
                _ if (b.len() as f64) < remainder_len => {}
                _ => trailing += 1,
            }
        }
        let n_g = groups.len();
        hyp.count("neuron_groups", n_g);
        hyp.count("remainder_neurons", trailing);
        let mut conf = 1.0f64;
        if trailing > 3 || stray > 0 {
            conf *= 0.2;
            hyp.notes.push(format!("{trailing} trailing remainders, {stray} stray MAC groups"));
        }
        let macs: Vec<usize> = groups.iter().map(|g| g.1).collect();
        if let Some((m, dis)) = majority(&macs) {
            hyp.count("mac_groups_per_neuron_group", m);
            if m != in_len / 4 || dis > 0.05 {
                conf *= 0.3;
                hyp.notes.push(format!("{m} MAC groups per neuron group, expected {}", in_len / 4));
            }
        }
        let period_us = if n_g >= 2 {
            let mut iv: Vec<usize> = groups.windows(2).map(|w| w[1].0 - w[0].0).collect();
            iv.sort_unstable();
            iv[iv.len() / 2] as f64 / self.per_us()
        } else {
            durations::dense(&self.config.cost, in_len, 4)
        };
        if period_us < self.config.dense_period_floor_us {
            conf = conf.min(0.45);
            hyp.notes.push(format!(
                "group period {period_us:.2} us is below the {:.2} us detectability floor",
                self.config.dense_period_floor_us
            ));
        }
        let n_e = 4 * n_g + trailing.min(3);
        if n_e == 0 {
            return hyp.fail(ExtractError::NoPeriodicity);
        }
        hyp.params.n_e = Some(n_e);
        hyp.confidence = conf * self.noise.factor;
        hyp
    }

    pub fn classify_activation(&self, seg: Segment, n_elems: usize) -> LayerHypothesis {
        let mut hyp = LayerHypothesis::new(LayerKind::Activation, seg);
        let per = self.duration_us(seg) / n_elems.max(1) as f64;
        let cut = self.config.relu_cutoff();
        let c = &self.config.cost;
        let class = if per < cut { ActivationClass::ReLU } else { ActivationClass::SigmoidOrTanh };
        let span = (c.act_tanh / cut).ln().abs().max(1e-9);
        let mut conf = ((per / cut).ln().abs() / span).min(1.0);
        let nearest =
            [c.act_relu, c.act_tanh, c.act_sigmoid].iter().map(|&e| (per / e).ln().abs()).fold(f64::INFINITY, f64::min);
        if nearest > 2f64.ln() {
            conf *= 0.3;
            hyp.notes.push(format!("{per:.3} us per element matches no calibrated activation"));
        }
        hyp.count("elements", n_elems);
        hyp.params.activation = Some(class);
        hyp.confidence = conf * self.noise.factor;
        hyp
    }

    /// Full pipeline from a trace and the known input shape.
    pub fn extract_architecture(&self, input: TensorShape) -> ExtractionReport {
        let mut report = ExtractionReport {
            hypotheses: Vec::new(),
            recovered: None,
            best_guess: None,
            resolved: false,
            prior_used: Vec::new(),
            errors: Vec::new(),
            noise: Some(self.noise),
            input_shape: input,
            config: self.config.clone(),
        };
        let segments = match self.split_layers() {
            Ok(s) => s,
            Err(e) => {
                report.errors.push(e);
                return report;
            }
        };

        let mut shape = Some(input);
        let mut prev = None;
        let mut layers = Vec::new();
        for seg in &segments {
            let (kind, kind_conf, prior) = self.classify_layer(*seg, shape, prev);
            if let Some(p) = prior {
                report.prior_used.push(format!("layer {}: {p}", report.hypotheses.len() + 1));
            }
            let mut hyp = match (kind, shape) {
                (LayerKind::Conv, Some(s)) => self.extract_conv(*seg, s.c, s.h),
                (LayerKind::Dense, Some(s)) => self.extract_dense(*seg, s.len()),
                (LayerKind::MaxPool, Some(s)) => self.extract_maxpool(*seg, s.h),
                (LayerKind::Activation, Some(s)) => self.classify_activation(*seg, s.len()),
                _ => LayerHypothesis::new(kind, *seg),
            };
            hyp.confidence = hyp.confidence.min(kind_conf);
            let spec = hyp.params.to_spec(hyp.kind);
            shape = match (&spec, shape) {
                (Some(spec), Some(s)) => spec.output_shape(s).ok(),
                _ => None,
            };
            if shape.is_none() && hyp.errors.is_empty() && hyp.kind != LayerKind::Unknown {
                hyp.notes.push("output shape could not be propagated".into());
                hyp.confidence = 0.0;
            }
            layers.push(spec);
            prev = Some(hyp.kind);
            report.hypotheses.push(hyp);
        }

        self.check_gaps(&segments, &mut report);

        if let Some(layers) = layers.into_iter().collect::<Option<Vec<_>>>() {
            let arch = Architecture::new(input, layers);
            if arch.validate().is_ok() {
                report.best_guess = Some(arch);
            }
        }
        report.resolved = report.best_guess.is_some()
            && report.hypotheses.iter().all(|h| h.confidence >= self.config.confidence_floor);
        if report.resolved {
            report.recovered = report.best_guess.clone();
        }
        report
    }

    /// Inter-layer silences come from one fixed cost; uneven ones point at
    /// merged or spurious segments.
    fn check_gaps(&self, segments: &[Segment], report: &mut ExtractionReport) {
        if segments.len() < 3 {
            return;
        }
        let gaps: Vec<f64> = segments.windows(2).map(|w| w[1].start as f64 - w[0].end as f64).collect();
        let mut sorted = gaps.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2].max(1.0);
        for (i, g) in gaps.iter().enumerate() {
            if (g / median - 1.0).abs() > self.config.gap_tolerance {
                for h in &mut report.hypotheses[i..=i + 1] {
                    h.confidence = h.confidence.min(0.25);
                    h.notes.push("irregular inter-layer gap".into());
                }
            }
        }
    }
}

fn calibrate(config: &ExtractionConfig, sample_rate: f64) -> Vec<ClassSignature> {
    use EventClass::*;
    let c = &config.cost;
    let cases = [
        (Im2colColumn, c.im2col_column),
        (GemmKernelPair, c.kernel_pair_overhead / 2.0),
        (SimdMacGroup, c.simd_mac_group),
        (GemmRemainder, c.gemm_remainder),
        (PoolXStep, c.pool_x_step),
        (PoolYStep, c.pool_y_step),
        (DenseNeuronGroup, c.neuron_group_overhead / 2.0),
        (DenseMacGroup, c.dense_mac_group),
        (DenseRemainderNeuron, c.dense_remainder_mac),
        (ActReluElem, c.act_relu),
        (ActTanhElem, c.act_tanh),
        (ActSigmoidElem, c.act_sigmoid),
    ];
    let params =
        RenderParams { sample_rate_hz: sample_rate, noise_sigma: 0.0, padding_fraction: 1.0, ..config.render.clone() };
    cases
        .iter()
        .filter_map(|&(class, d)| {
            // Leaves of one class usually come in runs; short ones merge.
            let root = EventNode::composite("calibration", None, 0.0, vec![EventNode::leaf("x", class, d); 4]);
            let trace = render_trace(&root, &params).ok()?;
            let b = find_bursts(&trace.samples, 0, config.fine_window.max(2), 0.0)
                .into_iter()
                .max_by(|a, b| a.len().cmp(&b.len()).then(b.start.cmp(&a.start)))?;
            Some(ClassSignature { class, amplitude: b.amplitude, period: b.period })
        })
        .collect()
}

fn coarse_window(n: usize, config: &ExtractionConfig) -> usize {
    config.coarse_window.min((n / 8).max(2))
}

fn coarse_segments(trace: &Trace, config: &ExtractionConfig) -> Result<Vec<Segment>, ExtractError> {
    if trace.is_empty() {
        return Err(ExtractError::NoActivityDetected);
    }
    let window = coarse_window(trace.len(), config);
    let hop = config.coarse_hop.clamp(1, window);
    let env = signal::envelope(trace, window, hop)?;
    let spec = signal::spectrogram(trace, window, hop)?;
    Ok(signal::segment_boundaries(&env, &spec, &config.segment)?)
}

/// Noise RMS: the median coarse RMS well away from any activity, or a fit to
/// the quietest frames when there is no such silence.
fn estimate_noise(trace: &Trace, config: &ExtractionConfig, segments: Option<&[Segment]>) -> NoiseEstimate {
    let window = coarse_window(trace.len(), config);
    let hop = config.coarse_hop.clamp(1, window);
    let sigma = envelope_of(&trace.samples, window, hop)
        .map(|env| {
            let mut quiet: Vec<f64> = match segments {
                Some(segs) => env
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| {
                        let (a, b) = (i * hop, i * hop + window);
                        segs.iter().all(|s| b + window <= s.start || a >= s.end + window)
                    })
                    .map(|(_, &v)| v)
                    .collect(),
                None => Vec::new(),
            };
            if quiet.len() >= 8 {
                quiet.sort_by(f64::total_cmp);
                quiet[quiet.len() / 2]
            } else {
                let logs: Vec<f64> = env.iter().map(|&v| (v + 1e-12).ln()).collect();
                Baseline::from_quiet_fraction(&logs, config.segment.baseline_quantile).mean.exp()
            }
        })
        .unwrap_or(0.0);
    let snr = config.render.min_class_amplitude() / sigma.max(1e-12);
    let factor = ((snr - 1.0) / (config.snr_full - 1.0).max(1e-9)).clamp(0.0, 1.0);
    NoiseEstimate { sigma, snr, factor }
}

pub fn split_layers(trace: &Trace, config: &ExtractionConfig) -> Result<Vec<Segment>, ExtractError> {
    Extractor::new(trace, config.clone()).split_layers()
}

pub fn extract_architecture(trace: &Trace, input: TensorShape, config: &ExtractionConfig) -> ExtractionReport {
    Extractor::new(trace, config.clone()).extract_architecture(input)
}
