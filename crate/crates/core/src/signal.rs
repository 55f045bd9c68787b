//! Trace-analysis primitives: RMS envelopes, spectrograms, activity
//! segmentation, periodic-pattern counting and spike detection.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::trace::Trace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("window of {window} samples is larger than the trace ({len} samples)")]
    WindowLargerThanTrace { window: usize, len: usize },
    #[error("no activity detected")]
    NoActivityDetected,
    #[error("no periodicity (best autocorrelation prominence {prominence:.3})")]
    NoPeriodicity { prominence: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Half-open sample range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end, "empty segment {start}..{end}");
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Sliding-window RMS.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub window: usize,
    pub hop: usize,
    pub sample_rate: f64,
    /// Length of the analysed signal, in samples.
    pub n_samples: usize,
    pub values: Vec<f64>,
}

impl Envelope {
    /// Sample index at the centre of frame `i`.
    pub fn center(&self, i: usize) -> usize {
        i * self.hop + self.window / 2
    }
}

/// RMS of `samples[i·hop .. i·hop + window)` for every full window.
pub fn envelope_of(samples: &[f32], window: usize, hop: usize) -> Result<Vec<f64>, SignalError> {
    if window < 1 || hop < 1 {
        return Err(SignalError::InvalidParameter("window and hop must be >= 1".into()));
    }
    if window > samples.len() {
        return Err(SignalError::WindowLargerThanTrace { window, len: samples.len() });
    }
    let mut prefix = Vec::with_capacity(samples.len() + 1);
    let mut acc = 0.0f64;
    prefix.push(0.0);
    for &s in samples {
        acc += (s as f64) * (s as f64);
        prefix.push(acc);
    }
    let frames = (samples.len() - window) / hop + 1;
    Ok((0..frames)
        .map(|i| {
            let a = i * hop;
            ((prefix[a + window] - prefix[a]).max(0.0) / window as f64).sqrt()
        })
        .collect())
}

pub fn envelope(trace: &Trace, window: usize, hop: usize) -> Result<Envelope, SignalError> {
    if window < 2 {
        return Err(SignalError::InvalidParameter("envelope window must be >= 2".into()));
    }
    Ok(Envelope {
        window,
        hop,
        sample_rate: trace.sample_rate,
        n_samples: trace.len(),
        values: envelope_of(&trace.samples, window, hop)?,
    })
}

/// Hann-weighted short-time Fourier magnitudes, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub window: usize,
    pub hop: usize,
    pub sample_rate: f64,
    pub n_frames: usize,
    pub n_bins: usize,
    pub magnitudes: Vec<f32>,
}

impl Spectrogram {
    pub fn frame(&self, i: usize) -> &[f32] {
        &self.magnitudes[i * self.n_bins..(i + 1) * self.n_bins]
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate / self.window as f64
    }

    /// Index and magnitude of the strongest non-DC bin of frame `i`.
    pub fn dominant_bin(&self, i: usize) -> (usize, f32) {
        self.frame(i)
            .iter()
            .enumerate()
            .skip(1)
            .fold((0, 0.0f32), |best, (k, &m)| if m > best.1 { (k, m) } else { best })
    }
}

pub fn spectrogram(trace: &Trace, window: usize, hop: usize) -> Result<Spectrogram, SignalError> {
    if window < 2 || hop < 1 {
        return Err(SignalError::InvalidParameter("spectrogram window must be >= 2 and hop >= 1".into()));
    }
    let n = trace.len();
    if window > n {
        return Err(SignalError::WindowLargerThanTrace { window, len: n });
    }
    let hann: Vec<f64> =
        (0..window).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos()).collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let n_frames = (n - window) / hop + 1;
    let n_bins = window / 2 + 1;
    let mut magnitudes = Vec::with_capacity(n_frames * n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..n_frames {
        let frame = &trace.samples[f * hop..f * hop + window];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&hann) {
            *b = Complex::new(x as f64 * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        magnitudes.extend(buf[..n_bins].iter().map(|c| c.norm() as f32));
    }
    Ok(Spectrogram { window, hop, sample_rate: trace.sample_rate, n_frames, n_bins, magnitudes })
}

/// Level and spread of the quiet part of a distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mean: f64,
    pub std: f64,
}

impl Baseline {
    /// Fits a Gaussian to the quietest `quantile` of `values` (at least
    /// `MIN_QUIET` of them) by regressing the order statistics on their normal
    /// scores.
    pub fn from_quiet_fraction(values: &[f64], quantile: f64) -> Self {
        const MIN_QUIET: usize = 32;
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = ((quantile * n as f64).ceil() as usize).max(MIN_QUIET).min(n);
        if m < 2 {
            return Self { mean: sorted[0], std: 0.0 };
        }
        let normal = Normal::standard();
        let z: Vec<f64> = (0..m).map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
        let (zm, xm) = (z.iter().sum::<f64>() / m as f64, sorted[..m].iter().sum::<f64>() / m as f64);
        let (mut szx, mut szz) = (0.0, 0.0);
        for (zi, xi) in z.iter().zip(&sorted[..m]) {
            szx += (zi - zm) * (xi - xm);
            szz += (zi - zm) * (zi - zm);
        }
        let std = if szz > 0.0 { (szx / szz).max(0.0) } else { 0.0 };
        Self { mean: xm - std * zm, std }
    }

    /// Detection threshold with a look-elsewhere correction for `n` trials.
    pub fn threshold(&self, k_sigma: f64, n: usize) -> f64 {
        let k = k_sigma.max((2.0 * (n.max(2) as f64).ln()).sqrt() + 1.0);
        self.mean + k * self.std + 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentParams {
    /// Silence shorter than this does not split activity.
    pub min_gap_us: f64,
    pub k_sigma: f64,
    /// Fraction of quietest frames used to estimate the baseline.
    pub baseline_quantile: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self { min_gap_us: 20.0, k_sigma: 3.0, baseline_quantile: 0.05 }
    }
}

/// Ratio over the quietest frames' spectral peak that marks a frame active.
const SPECTRAL_MARGIN: f64 = 4.0;

/// Splits a trace into maximal active runs.
///
/// A frame is active when its envelope clears the quiet baseline, or when the
/// strongest spectral line is well above anything seen in the quietest
/// frames. Runs separated by less than `min_gap_us`
/// of silence are merged.
pub fn segment_boundaries(
    env: &Envelope,
    spec: &Spectrogram,
    params: &SegmentParams,
) -> Result<Vec<Segment>, SignalError> {
    let n = env.values.len();
    if n == 0 {
        return Err(SignalError::NoActivityDetected);
    }
    // RMS of noise is right-skewed; its logarithm is close to Gaussian.
    let logs: Vec<f64> = env.values.iter().map(|&v| (v + 1e-12).ln()).collect();
    let thr = Baseline::from_quiet_fraction(&logs, params.baseline_quantile).threshold(params.k_sigma, n).exp();
    let mut active: Vec<bool> = env.values.iter().map(|&v| v > thr).collect();

    if spec.n_frames > 0 {
        // Reference: the strongest spectral peak among the lowest-energy frames.
        let energy: Vec<f64> =
            (0..spec.n_frames).map(|i| spec.frame(i).iter().map(|&m| (m as f64).powi(2)).sum()).collect();
        let mut order: Vec<usize> = (0..spec.n_frames).collect();
        order.sort_by(|&a, &b| energy[a].total_cmp(&energy[b]));
        let n_ref = ((spec.n_frames as f64 * params.baseline_quantile).ceil() as usize).clamp(1, spec.n_frames);
        let reference = order[..n_ref].iter().map(|&i| spec.dominant_bin(i).1 as f64).fold(0.0f64, f64::max);
        let sthr = SPECTRAL_MARGIN * reference;
        for j in 0..spec.n_frames {
            if spec.dominant_bin(j).1 as f64 > sthr + 1e-9 {
                let centre = (j * spec.hop + spec.window / 2) as f64;
                let i = ((centre - (env.window / 2) as f64) / env.hop as f64).round();
                if i >= 0.0 && (i as usize) < n {
                    active[i as usize] = true;
                }
            }
        }
    }

    let min_gap = (params.min_gap_us * env.sample_rate * 1e-6).max(0.0);
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if !active[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && active[i] {
            i += 1;
        }
        match runs.last_mut() {
            Some(last) if ((start - last.1) * env.hop) as f64 + 0.5 < min_gap => last.1 = i,
            _ => runs.push((start, i)),
        }
    }
    if runs.is_empty() {
        return Err(SignalError::NoActivityDetected);
    }
    // Edges are pulled in to the samples not covered by any inactive frame,
    // so re-segmenting with the complement zeroed reproduces them.
    let half = env.window.saturating_sub(env.hop) / 2;
    Ok(runs
        .into_iter()
        .map(|(a, b)| {
            let start = if a == 0 { 0 } else { (a - 1) * env.hop + env.window };
            let end = if b == n { env.n_samples } else { b * env.hop };
            if start < end {
                Segment::new(start, end)
            } else {
                let start = a * env.hop + half;
                Segment::new(start, ((b - 1) * env.hop + half + env.hop).min(env.n_samples).max(start + 1))
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountParams {
    /// RMS smoothing applied before analysis; 1 analyses raw samples.
    pub smooth_window: usize,
    /// Below this autocorrelation prominence there is no periodicity.
    pub min_prominence: f64,
    /// A lag within this fraction of the best peak is preferred when shorter.
    pub harmonic_tolerance: f64,
}

impl Default for CountParams {
    fn default() -> Self {
        Self { smooth_window: 12, min_prominence: 0.2, harmonic_tolerance: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternCount {
    pub count: usize,
    /// Repetition period in samples.
    pub period: f64,
    pub confidence: f64,
}

/// Autocorrelation of `x` (mean removed) for lags `0..=max_lag`, normalised
/// so that a perfectly periodic signal scores 1 at its period.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|&v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fwd.process(&mut buf);
    for c in &mut buf {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    let r0 = buf[0].re;
    let max_lag = max_lag.min(n - 1);
    if r0 <= 0.0 {
        return vec![0.0; max_lag + 1];
    }
    (0..=max_lag).map(|lag| buf[lag].re / r0 * n as f64 / (n - lag) as f64).collect()
}

/// Counts repetitions of a periodic motif inside `seg`.
///
/// The period is the autocorrelation peak, optionally restricted to lags
/// consistent with `expected_count = (min, max)` repetitions over the
/// segment. Repetitions are then counted as threshold onsets at least half a
/// period apart.
pub fn count_patterns(
    trace: &Trace,
    seg: Segment,
    expected_count: Option<(usize, usize)>,
    params: &CountParams,
) -> Result<PatternCount, SignalError> {
    let samples = &trace.samples[seg.range()];
    let x: Vec<f64> = if params.smooth_window <= 1 {
        samples.iter().map(|&v| v as f64).collect()
    } else {
        envelope_of(samples, params.smooth_window, 1)?
    };
    count_in_series(&x, expected_count, params)
}

/// [`count_patterns`] on an already-extracted series.
pub fn count_in_series(
    x: &[f64],
    expected_count: Option<(usize, usize)>,
    params: &CountParams,
) -> Result<PatternCount, SignalError> {
    let m = x.len();
    if m < 8 {
        return Err(SignalError::NoPeriodicity { prominence: 0.0 });
    }
    let max_lag = m / 2;
    let (lo, hi) = match expected_count {
        Some((min, max)) => {
            let min = min.max(2);
            let max = max.max(min);
            ((m / (max + 1)).max(2), (m / min + 1).min(max_lag))
        }
        None => (2, max_lag),
    };
    if lo >= hi {
        return Err(SignalError::NoPeriodicity { prominence: 0.0 });
    }
    let r = autocorrelation(x, hi + 1);
    let peaks: Vec<usize> =
        (lo.max(1)..=hi.min(r.len() - 2)).filter(|&l| r[l] > r[l - 1] && r[l] >= r[l + 1]).collect();
    let best = peaks.iter().map(|&l| r[l]).fold(f64::NEG_INFINITY, f64::max);
    if peaks.is_empty() || best < params.min_prominence {
        return Err(SignalError::NoPeriodicity { prominence: best.max(0.0) });
    }
    let lag = peaks.into_iter().find(|&l| r[l] >= params.harmonic_tolerance * best).expect("best peak qualifies");
    let period = {
        let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        lag as f64 + shift
    };

    // Fold at the period to find the motif's swing, then count onsets.
    let p = lag;
    let mut fold = vec![(0.0, 0usize); p];
    for (i, &v) in x.iter().enumerate() {
        fold[i % p].0 += v;
        fold[i % p].1 += 1;
    }
    let profile: Vec<f64> = fold.iter().map(|&(s, k)| s / k.max(1) as f64).collect();
    let (mn, mx) = profile.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let theta = 0.5 * (mn + mx);
    let refractory = period * 0.5;
    let mut count = 0usize;
    let mut last: Option<usize> = None;
    let mut below = true;
    for (i, &v) in x.iter().enumerate() {
        if v >= theta {
            if below && last.is_none_or(|l| (i - l) as f64 >= refractory) {
                count += 1;
                last = Some(i);
            }
            below = false;
        } else {
            below = true;
        }
    }
    Ok(PatternCount { count: count.max(1), period, confidence: r[lag].clamp(0.0, 1.0) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeParams {
    pub window: usize,
    /// Wider excursions are bursts, not spikes.
    pub max_width: usize,
}

impl Default for SpikeParams {
    fn default() -> Self {
        Self { window: 6, max_width: 48 }
    }
}

/// Short excursions far above the segment's typical level.
///
/// Level and spread are the median and MAD of the segment envelope, so that
/// a dense spike train does not raise its own threshold.
pub fn detect_spikes(trace: &Trace, seg: Segment, k_sigma: f64, params: &SpikeParams) -> Vec<usize> {
    let samples = &trace.samples[seg.range()];
    let Ok(env) = envelope_of(samples, params.window.max(1), 1) else { return Vec::new() };
    let mut sorted = env.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let mut dev: Vec<f64> = env.iter().map(|v| (v - median).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let sigma = 1.4826 * dev[dev.len() / 2];
    let theta = median + k_sigma * sigma;
    if sigma <= 0.0 && env.iter().all(|&v| v <= theta) {
        return Vec::new();
    }

    let mut found: Vec<(usize, f64)> = Vec::new();
    let mut i = 0;
    while i < env.len() {
        if env[i] <= theta {
            i += 1;
            continue;
        }
        let a = i;
        while i < env.len() && env[i] > theta {
            i += 1;
        }
        if i - a > params.max_width {
            continue;
        }
        let span = &samples[a..(i - 1 + params.window).min(samples.len())];
        let (off, peak) = span
            .iter()
            .enumerate()
            .fold((0, 0.0f32), |best, (k, &v)| if v.abs() > best.1 { (k, v.abs()) } else { best });
        found.push((a + off, peak as f64));
    }
    if found.len() > 2 {
        let mut gaps: Vec<usize> = found.windows(2).map(|w| w[1].0 - w[0].0).collect();
        gaps.sort_unstable();
        let half_period = gaps[gaps.len() / 2] / 2;
        let mut order: Vec<usize> = (0..found.len()).collect();
        order.sort_by(|&x, &y| found[y].1.total_cmp(&found[x].1));
        let mut keep = vec![true; found.len()];
        for &k in &order {
            if !keep[k] {
                continue;
            }
            for j in 0..found.len() {
                if j != k && keep[j] && found[j].0.abs_diff(found[k].0) < half_period {
                    keep[j] = false;
                }
            }
        }
        found = found.into_iter().zip(keep).filter(|x| x.1).map(|x| x.0).collect();
    }
    found.into_iter().map(|(i, _)| seg.start + i).collect()
}

/// A local maximum that stands out from its surroundings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub index: usize,
    pub height: f64,
}

/// Local maxima of `x` whose prominence is at least `rel` times their height.
/// Both array ends count as higher ground.
pub fn prominent_peaks(x: &[f64], rel: f64) -> Vec<Bump> {
    let mut out: Vec<Bump> = Vec::new();
    let n = x.len();
    let mut i = 1;
    while i + 1 < n {
        if !(x[i] > x[i - 1] && x[i] >= x[i + 1]) {
            i += 1;
            continue;
        }
        // plateau
        let mut j = i;
        while j + 1 < n && x[j + 1] == x[i] {
            j += 1;
        }
        if j + 1 < n && x[j + 1] > x[i] {
            i = j + 1;
            continue;
        }
        let h = x[i];
        let floor = h * (1.0 - rel);
        // Running off either end only counts as a dip if the edge itself is low.
        let higher = h * (1.0 + 1e-9);
        let side_ok = |iter: &mut dyn Iterator<Item = usize>| {
            for k in iter {
                if x[k] > higher {
                    return false;
                }
                if x[k] <= floor {
                    return true;
                }
            }
            false
        };
        if side_ok(&mut (0..i).rev()) && side_ok(&mut (j + 1..n)) {
            let b = Bump { index: (i + j) / 2, height: h };
            // Near-equal ripple peaks with no dip between them are one bump.
            match out.last_mut() {
                Some(last) if x[last.index..b.index].iter().all(|&v| v > last.height.max(h) * (1.0 - rel)) => {
                    if h >= last.height {
                        *last = b;
                    }
                }
                _ => out.push(b),
            }
        }
        i = j + 1;
    }
    out
}
