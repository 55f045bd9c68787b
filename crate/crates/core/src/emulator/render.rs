use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EventClass, EventNode};
use crate::trace::Trace;

/// Shortest span that may be rendered, in samples.
pub const MIN_SPAN_SAMPLES: f64 = 8.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("sample rate too low: shortest event spans {0:.2} samples (need >= 8)")]
    SampleRateTooLow(f64),
    #[error("invalid render parameters: {0}")]
    Invalid(String),
}

/// Waveform synthesis settings.
///
/// Amplitudes are in arbitrary units and carrier periods in samples. For
/// composite classes the amplitude applies to the composite's preamble, which
/// renders as a short spike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderParams {
    pub sample_rate_hz: f64,
    pub amplitude: BTreeMap<EventClass, f64>,
    pub carrier_period: BTreeMap<EventClass, f64>,
    /// Standard deviation of the additive noise on one raw acquisition.
    pub noise_sigma: f64,
    /// Number of raw acquisitions averaged into the trace.
    pub n_average: u32,
    pub rng_seed: u64,
    /// Silence recorded before and after the inference, as a fraction of its duration.
    pub padding_fraction: f64,
    /// Lower bound on that silence, in µs.
    pub min_padding_us: f64,
}

/// Amplitude ladder in 2.5 dB steps, lowest first.
const LADDER: [(EventClass, u32); 13] = [
    (EventClass::ActReluElem, 0),
    (EventClass::PoolXStep, 1),
    (EventClass::ActTanhElem, 2),
    (EventClass::ActSigmoidElem, 3),
    (EventClass::PoolYStep, 4),
    (EventClass::GemmRemainder, 5),
    (EventClass::DenseRemainderNeuron, 6),
    (EventClass::Im2colColumn, 7),
    (EventClass::SimdMacGroup, 8),
    (EventClass::DenseMacGroup, 9),
    (EventClass::GemmCall, 10),
    (EventClass::GemmKernelPair, 13),
    (EventClass::DenseNeuronGroup, 14),
];

impl Default for RenderParams {
    fn default() -> Self {
        let mut amplitude: BTreeMap<EventClass, f64> =
            LADDER.iter().map(|&(c, step)| (c, 10f64.powf(2.5 * step as f64 / 20.0))).collect();
        amplitude.insert(EventClass::LayerGap, 0.0);
        let carrier_period = [
            (EventClass::Im2colColumn, 7.0),
            (EventClass::GemmCall, 3.0),
            (EventClass::GemmKernelPair, 3.0),
            (EventClass::SimdMacGroup, 5.0),
            (EventClass::GemmRemainder, 9.0),
            (EventClass::PoolXStep, 6.0),
            (EventClass::PoolYStep, 8.0),
            (EventClass::DenseNeuronGroup, 3.0),
            (EventClass::DenseMacGroup, 5.0),
            (EventClass::DenseRemainderNeuron, 9.0),
            (EventClass::ActReluElem, 4.0),
            (EventClass::ActSigmoidElem, 11.0),
            (EventClass::ActTanhElem, 10.0),
            (EventClass::LayerGap, 2.0),
        ]
        .into_iter()
        .collect();
        Self {
            sample_rate_hz: 200e6,
            amplitude,
            carrier_period,
            noise_sigma: 0.2,
            n_average: 16,
            rng_seed: 1,
            padding_fraction: 0.06,
            min_padding_us: 25.0,
        }
    }
}

impl RenderParams {
    pub fn amplitude_of(&self, class: EventClass) -> f64 {
        self.amplitude.get(&class).copied().unwrap_or(0.0)
    }

    pub fn carrier_of(&self, class: EventClass) -> f64 {
        self.carrier_period.get(&class).copied().unwrap_or(4.0)
    }

    /// Smallest non-zero class amplitude.
    pub fn min_class_amplitude(&self) -> f64 {
        self.amplitude.values().copied().filter(|&a| a > 0.0).fold(f64::INFINITY, f64::min)
    }

    /// Noise left after averaging.
    pub fn residual_sigma(&self) -> f64 {
        self.noise_sigma / (self.n_average.max(1) as f64).sqrt()
    }

    /// Silence added on each side of an inference lasting `duration` µs.
    pub fn padding_us(&self, duration: f64) -> f64 {
        (duration * self.padding_fraction).max(self.min_padding_us)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: String| Err(RenderError::Invalid(m));
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return bad(format!("sample_rate_hz must be > 0, got {}", self.sample_rate_hz));
        }
        if self.n_average == 0 {
            return bad("n_average must be >= 1".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0".into());
        }
        if !(0.0..=10.0).contains(&self.padding_fraction) {
            return bad("padding_fraction must be in [0, 10]".into());
        }
        if !(self.min_padding_us.is_finite() && self.min_padding_us >= 0.0) {
            return bad("min_padding_us must be >= 0".into());
        }
        for (c, &a) in &self.amplitude {
            if !(a.is_finite() && a >= 0.0) {
                return bad(format!("amplitude of {c:?} must be >= 0"));
            }
        }
        for (c, &p) in &self.carrier_period {
            if !(p.is_finite() && p >= 2.0) {
                return bad(format!("carrier period of {c:?} must be >= 2 samples"));
            }
        }
        Ok(())
    }
}

/// Raised-cosine ramps over a quarter of the burst on each side, capped at
/// `MAX_RAMP` samples so long leaves stay flat.
const MAX_RAMP: f64 = 40.0;

fn taper(i: usize, len: usize) -> f64 {
    let ramp = (0.25 * len as f64).min(MAX_RAMP);
    let d = (i as f64 + 0.5).min(len as f64 - i as f64 - 0.5);
    if d < ramp {
        0.5 * (1.0 - (PI * d / ramp).cos())
    } else {
        1.0
    }
}

fn burst(out: &mut [f64], from: usize, to: usize, amp: f64, period: f64) {
    let to = to.min(out.len());
    if amp == 0.0 || from >= to {
        return;
    }
    let len = to - from;
    let w = 2.0 * PI / period;
    for (i, v) in out[from..to].iter_mut().enumerate() {
        *v += amp * taper(i, len) * (w * i as f64 + PI / 4.0).sin();
    }
}

/// Renders an event tree to a sampled trace.
///
/// Every leaf becomes a tapered burst at its class amplitude and carrier;
/// composite preambles become spikes over their first half, followed by
/// silence; gaps stay silent. Averaging
/// `n_average` independent Gaussian realisations is drawn directly as a
/// single Gaussian of variance `noise_sigma² / n_average`.
pub fn render_trace(root: &EventNode, params: &RenderParams) -> Result<Trace, RenderError> {
    params.validate()?;
    let per_us = params.sample_rate_hz * 1e-6;
    let mut shortest = f64::INFINITY;
    root.visit(&mut |n| {
        if n.children.is_empty() {
            shortest = shortest.min(n.duration);
        } else if n.preamble > 0.0 {
            shortest = shortest.min(n.preamble / 2.0);
        }
    });
    let shortest = shortest * per_us;
    if shortest < MIN_SPAN_SAMPLES {
        return Err(RenderError::SampleRateTooLow(shortest));
    }
    let pad = params.padding_us(root.duration);
    let origin = root.start - pad;
    let n = ((root.duration + 2.0 * pad) * per_us).round() as usize;
    let idx = |t: f64| (((t - origin) * per_us).round().max(0.0) as usize).min(n);

    let mut acc = vec![0.0f64; n];
    root.visit(&mut |node| {
        let Some(class) = node.class else { return };
        let (from, to) = if node.children.is_empty() {
            (idx(node.start), idx(node.end()))
        } else if node.preamble > 0.0 {
            (idx(node.start), idx(node.start + node.preamble / 2.0))
        } else {
            return;
        };
        burst(&mut acc, from, to, params.amplitude_of(class), params.carrier_of(class));
    });

    let sigma = params.residual_sigma();
    let samples = if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| RenderError::Invalid(e.to_string()))?;
        acc.iter().map(|&v| (v + normal.sample(&mut rng)) as f32).collect()
    } else {
        acc.iter().map(|&v| v as f32).collect()
    };
    let mut trace = Trace::new(params.sample_rate_hz, samples).map_err(|e| RenderError::Invalid(e.to_string()))?;
    trace.annotation = None;
    Ok(trace)
}
