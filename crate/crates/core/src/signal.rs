//! Raw IMU stream preprocessing: Butterworth bandpass filtering, trial length
//! normalization and per-channel amplitude scaling.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

/// Number of sensors (six IMUs, each an accelerometer plus a gyroscope).
pub const SENSORS: usize = 12;
/// Axes per sensor.
pub const AXES: usize = 3;
/// Channels per trial, `SENSORS * AXES`; axis `k` of sensor `s` is channel `3s + k`.
pub const CHANNELS: usize = SENSORS * AXES;
/// Sample rate of the recordings.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 25.0;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("trial must have {CHANNELS} channels, got {0}")]
    ChannelCount(usize),
    #[error("channel {channel} has {len} frames, expected {expected}")]
    RaggedChannels { channel: usize, len: usize, expected: usize },
    #[error("trial has no frames")]
    NoFrames,
    #[error("zone must be in 1..=12, got {0}")]
    Zone(u8),
    #[error("sample rate must be positive, got {0}")]
    SampleRate(f64),
    #[error("invalid filter design: {0}")]
    FilterDesign(String),
    #[error("cannot fit a scaler on an empty training set")]
    EmptyTrainingSet,
}

/// One lift trial: 36 equally long channel sequences plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecording {
    pub subject_id: u32,
    pub zone: u8,
    pub trial_index: u32,
    pub sample_rate_hz: f64,
    /// `channels[3 * sensor + axis][frame]`
    pub channels: Vec<Vec<f64>>,
    /// Frame count of the recording before any padding or truncation.
    pub source_frames: usize,
}

impl TrialRecording {
    pub fn new(
        subject_id: u32,
        zone: u8,
        trial_index: u32,
        sample_rate_hz: f64,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self, SignalError> {
        if channels.len() != CHANNELS {
            return Err(SignalError::ChannelCount(channels.len()));
        }
        let frames = channels[0].len();
        if frames == 0 {
            return Err(SignalError::NoFrames);
        }
        if let Some((channel, c)) = channels.iter().enumerate().find(|(_, c)| c.len() != frames) {
            return Err(SignalError::RaggedChannels { channel, len: c.len(), expected: frames });
        }
        if !(1..=12).contains(&zone) {
            return Err(SignalError::Zone(zone));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(SignalError::SampleRate(sample_rate_hz));
        }
        Ok(Self { subject_id, zone, trial_index, sample_rate_hz, channels, source_frames: frames })
    }

    pub fn frame_count(&self) -> usize {
        self.channels[0].len()
    }

    /// Returns a copy with every channel replaced by `f(channel)`.
    pub fn map_channels(&self, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Self {
        let channels = self.channels.iter().enumerate().map(|(i, c)| f(i, c)).collect();
        Self { channels, ..self.clone() }
    }
}

/// One second-order section, normalized so that `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Transfer function evaluated at `z`.
    pub fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b0 + zi * (self.b1 + zi * self.b2);
        let den = 1.0 + zi * (self.a1 + zi * self.a2);
        num / den
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }
}

/// Digital Butterworth bandpass realized as a cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct BandpassFilter {
    pub order: usize,
    pub low_hz: f64,
    /// Upper edge actually used; below the requested one if it was clamped.
    pub high_hz: f64,
    pub sample_rate_hz: f64,
    pub sections: Vec<Biquad>,
    /// Non-fatal adjustments made during design.
    pub warnings: Vec<String>,
}

impl Default for BandpassFilter {
    fn default() -> Self {
        design_bandpass(2, 2.0, 12.0, DEFAULT_SAMPLE_RATE_HZ).expect("default filter is valid")
    }
}

impl BandpassFilter {
    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, 2.0 * PI * freq_hz / self.sample_rate_hz);
        self.sections.iter().map(|s| s.response(z)).product()
    }

    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        filter_channel(x, self)
    }
}

/// Designs an order-`order` Butterworth bandpass: analog lowpass prototype,
/// lowpass-to-bandpass transform at pre-warped edges, bilinear transform, then
/// grouping of conjugate pole pairs into sections.
///
/// An upper edge at or above Nyquist is clamped to `0.99 * nyquist` and
/// recorded in `warnings`.
pub fn design_bandpass(
    order: usize,
    low_hz: f64,
    high_hz: f64,
    sample_rate_hz: f64,
) -> Result<BandpassFilter, SignalError> {
    let bad = |m: String| Err(SignalError::FilterDesign(m));
    if order == 0 {
        return bad("order must be at least 1".into());
    }
    if !(low_hz > 0.0 && high_hz > 0.0 && sample_rate_hz > 0.0) {
        return bad(format!("frequencies must be positive (low {low_hz}, high {high_hz}, rate {sample_rate_hz})"));
    }
    if low_hz >= high_hz {
        return bad(format!("low edge {low_hz} Hz must be below high edge {high_hz} Hz"));
    }
    if sample_rate_hz <= 2.0 * low_hz {
        return bad(format!("low edge {low_hz} Hz is not below Nyquist of {sample_rate_hz} Hz"));
    }
    let nyquist = sample_rate_hz / 2.0;
    let mut warnings = Vec::new();
    let mut high = high_hz;
    if high >= nyquist {
        high = 0.99 * nyquist;
        let msg = format!("high edge {high_hz} Hz at or above Nyquist {nyquist} Hz, clamped to {high} Hz");
        log::warn!("{msg}");
        warnings.push(msg);
        if low_hz >= high {
            return bad(format!("low edge {low_hz} Hz not below clamped high edge {high} Hz"));
        }
    }

    let fs2 = 2.0 * sample_rate_hz;
    let warp = |f: f64| fs2 * (PI * f / sample_rate_hz).tan();
    let (wl, wh) = (warp(low_hz), warp(high));
    let bw = wh - wl;
    let w0_sq = wl * wh;

    let n = order as f64;
    let mut analog_poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n);
        let p_lp = Complex64::from_polar(1.0, theta) * (bw / 2.0);
        let d = (p_lp * p_lp - w0_sq).sqrt();
        analog_poles.push(p_lp + d);
        analog_poles.push(p_lp - d);
    }

    // Bilinear transform. The N analog zeros at s = 0 land on z = 1 and the N
    // zeros at infinity on z = -1, so every section numerator is 1 - z^-2.
    let digital: Vec<Complex64> = analog_poles.iter().map(|&p| (fs2 + p) / (fs2 - p)).collect();
    let denom: Complex64 = analog_poles.iter().map(|&p| fs2 - p).product();
    let gain = ((bw * fs2).powi(order as i32) / denom).re;
    if !(gain > 0.0 && gain.is_finite()) {
        return bad(format!("degenerate filter gain {gain}"));
    }
    let section_gain = gain.powf(1.0 / n);

    let sections: Vec<Biquad> = pair_poles(&digital)
        .into_iter()
        .map(|(a1, a2)| Biquad { b0: section_gain, b1: 0.0, b2: -section_gain, a1, a2 })
        .collect();
    debug_assert_eq!(sections.len(), order);

    Ok(BandpassFilter { order, low_hz, high_hz: high, sample_rate_hz, sections, warnings })
}

/// Groups poles into real denominator pairs `(a1, a2)`: each complex pole with
/// its conjugate, remaining real poles two at a time in ascending order.
fn pair_poles(poles: &[Complex64]) -> Vec<(f64, f64)> {
    const TOL: f64 = 1e-10;
    let mut out = Vec::new();
    let mut reals = Vec::new();
    for p in poles {
        if p.im > TOL {
            out.push((-2.0 * p.re, p.norm_sqr()));
        } else if p.im.abs() <= TOL {
            reals.push(p.re);
        }
    }
    reals.sort_by(f64::total_cmp);
    for pair in reals.chunks(2) {
        match *pair {
            [r1, r2] => out.push((-(r1 + r2), r1 * r2)),
            [r] => out.push((-r, 0.0)),
            _ => unreachable!(),
        }
    }
    out
}

/// Causal single-pass filtering: each section in direct form II transposed
/// with zero initial state, sections applied in cascade.
pub fn filter_channel(x: &[f64], f: &BandpassFilter) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in &f.sections {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in y.iter_mut() {
            let input = *v;
            let out = s.b0 * input + z1;
            z1 = s.b1 * input - s.a1 * out + z2;
            z2 = s.b2 * input - s.a2 * out;
            *v = out;
        }
    }
    y
}

/// Applies `f` to every channel of the trial.
pub fn filter_trial(t: &TrialRecording, f: &BandpassFilter) -> TrialRecording {
    t.map_channels(|_, c| filter_channel(c, f))
}

/// Suffix-pads with zeros or truncates every channel to `target_frames`.
/// `source_frames` is left untouched.
pub fn pad_or_truncate(t: &TrialRecording, target_frames: usize) -> TrialRecording {
    t.map_channels(|_, c| {
        let mut out = c.to_vec();
        out.resize(target_frames, 0.0);
        out
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScalerMode {
    /// Mean 0, standard deviation 1.
    #[default]
    Standardize,
    /// Affine map of the training range onto [-1, 1].
    MinMax,
}

impl ScalerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalerMode::Standardize => "standardize",
            ScalerMode::MinMax => "minmax",
        }
    }
}

impl std::str::FromStr for ScalerMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "standardize" => Ok(Self::Standardize),
            "minmax" => Ok(Self::MinMax),
            other => Err(format!("unknown scaler mode `{other}` (expected standardize or minmax)")),
        }
    }
}

/// Below this spread a channel is treated as constant and scales to zero.
const DEGENERATE_SPREAD: f64 = 1e-12;

/// Per-channel affine scaling fitted on training data. Only constructible by
/// fitting (or by loading fitted parameters), so an unfitted scaler cannot be
/// applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScaler {
    mode: ScalerMode,
    /// `(min, max)` for minmax, `(mean, sd)` for standardize.
    params: Vec<(f64, f64)>,
}

impl ChannelScaler {
    pub fn from_params(mode: ScalerMode, params: Vec<(f64, f64)>) -> Result<Self, SignalError> {
        if params.len() != CHANNELS {
            return Err(SignalError::ChannelCount(params.len()));
        }
        Ok(Self { mode, params })
    }

    pub fn mode(&self) -> ScalerMode {
        self.mode
    }

    pub fn params(&self) -> &[(f64, f64)] {
        &self.params
    }

    pub fn apply(&self, t: &TrialRecording) -> TrialRecording {
        apply_scaler(t, self)
    }
}

/// Fits per-channel statistics across all frames of all training trials.
pub fn fit_scaler(training: &[TrialRecording], mode: ScalerMode) -> Result<ChannelScaler, SignalError> {
    if training.is_empty() {
        return Err(SignalError::EmptyTrainingSet);
    }
    let params = (0..CHANNELS)
        .map(|ch| {
            let values = || training.iter().flat_map(|t| t.channels[ch].iter().copied());
            match mode {
                ScalerMode::MinMax => {
                    values().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
                }
                ScalerMode::Standardize => {
                    let n = values().count() as f64;
                    let mean = values().sum::<f64>() / n;
                    let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    (mean, var.sqrt())
                }
            }
        })
        .collect();
    Ok(ChannelScaler { mode, params })
}

/// Scales each channel independently; degenerate (constant) channels map to zeros.
pub fn apply_scaler(t: &TrialRecording, s: &ChannelScaler) -> TrialRecording {
    t.map_channels(|ch, c| {
        let (p, q) = s.params[ch];
        match s.mode {
            ScalerMode::MinMax => {
                let range = q - p;
                if range < DEGENERATE_SPREAD {
                    vec![0.0; c.len()]
                } else {
                    c.iter().map(|v| 2.0 * (v - p) / range - 1.0).collect()
                }
            }
            ScalerMode::Standardize => {
                if q < DEGENERATE_SPREAD {
                    vec![0.0; c.len()]
                } else {
                    c.iter().map(|v| (v - p) / q).collect()
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trial(frames: usize, f: impl Fn(usize, usize) -> f64) -> TrialRecording {
        let channels = (0..CHANNELS).map(|c| (0..frames).map(|t| f(c, t)).collect()).collect();
        TrialRecording::new(1, 5, 0, 25.0, channels).unwrap()
    }

    /// Analog Butterworth bandpass magnitude at the pre-warped frequency; the
    /// bilinear transform maps digital frequency exactly onto this curve.
    fn analog_oracle(order: i32, low: f64, high: f64, fs: f64, f: f64) -> f64 {
        let warp = |x: f64| 2.0 * fs * (PI * x / fs).tan();
        let (wl, wh, w) = (warp(low), warp(high), warp(f));
        let x = (w * w - wl * wh) / (w * (wh - wl));
        1.0 / (1.0 + x.powi(2 * order)).sqrt()
    }

    #[test]
    fn matches_analog_prototype_through_bilinear_map() {
        for &(order, low, high, fs) in
            &[(2, 2.0, 12.0, 25.0), (1, 2.0, 3.0, 1000.0), (3, 0.5, 8.0, 50.0), (4, 5.0, 40.0, 200.0)]
        {
            let filt = design_bandpass(order, low, high, fs).unwrap();
            for i in 1..200 {
                let f = fs / 2.0 * i as f64 / 200.0;
                let want = analog_oracle(order as i32, low, high, fs, f);
                let got = filt.magnitude(f);
                assert!((got - want).abs() < 1e-9, "order {order} f {f}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn default_filter_is_bandpass_shaped() {
        let f = design_bandpass(2, 2.0, 12.0, 25.0).unwrap();
        assert!(f.warnings.is_empty());
        let peak = (1..1250).map(|i| f.magnitude(i as f64 * 0.01)).fold(0.0, f64::max);
        let db = |g: f64| 20.0 * (g / peak).log10();
        assert!(db(f.magnitude(0.2)) < -20.0);
        let centre = (2.0f64 * 12.0).sqrt();
        let band_max = (0..=1000).map(|i| f.magnitude(2.0 + 10.0 * i as f64 / 1000.0)).fold(0.0, f64::max);
        assert!(20.0 * (band_max / f.magnitude(centre)).log10() < 1.0);
        assert!(f.magnitude(0.2) < 0.1 * peak);
        assert!(f.magnitude(12.4) < 0.1 * peak);
    }

    #[test]
    fn sections_are_stable() {
        let f = design_bandpass(1, 2.0, 3.0, 1000.0).unwrap();
        assert_eq!(f.sections.len(), 1);
        for s in &f.sections {
            assert!(s.poles().iter().all(|p| p.norm() < 1.0));
        }
        for order in 1..=6 {
            let f = design_bandpass(order, 2.0, 12.0, 25.0).unwrap();
            assert_eq!(f.sections.len(), order);
            assert!(f.sections.iter().all(Biquad::is_stable));
        }
    }

    #[test]
    fn rejects_bad_edges_and_clamps_nyquist() {
        assert!(design_bandpass(2, 0.0, 12.0, 25.0).is_err());
        assert!(design_bandpass(2, -1.0, 12.0, 25.0).is_err());
        assert!(design_bandpass(2, 5.0, 5.0, 25.0).is_err());
        assert!(design_bandpass(2, 6.0, 5.0, 25.0).is_err());
        assert!(design_bandpass(0, 2.0, 5.0, 25.0).is_err());
        let f = design_bandpass(2, 2.0, 13.0, 25.0).unwrap();
        assert_eq!(f.high_hz, 0.99 * 12.5);
        assert_eq!(f.warnings.len(), 1);
        assert!(f.sections.iter().all(Biquad::is_stable));
    }

    #[test]
    fn zero_in_zero_out() {
        let f = BandpassFilter::default();
        assert!(filter_channel(&[0.0; 100], &f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dc_is_rejected() {
        let f = BandpassFilter::default();
        assert!(f.response(0.0).norm() < 1e-12);
        let y = filter_channel(&[1.0; 750], &f);
        assert_eq!(y.len(), 750);
        assert!(y[650..].iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn pad_truncate() {
        let t = trial(300, |c, t| (c * 1000 + t) as f64 + 1.0);
        let p = pad_or_truncate(&t, 750);
        assert_eq!(p.frame_count(), 750);
        assert_eq!(p.source_frames, 300);
        for c in &p.channels {
            assert!(c[300..].iter().all(|&v| v == 0.0));
        }
        assert_eq!(&p.channels[3][..300], &t.channels[3][..]);

        let full = trial(750, |c, t| (c + t) as f64);
        assert_eq!(pad_or_truncate(&full, 750), full);

        let long = trial(800, |c, t| (c * 7 + t) as f64);
        let cut = pad_or_truncate(&long, 750);
        assert_eq!(cut.source_frames, 800);
        for (a, b) in cut.channels.iter().zip(&long.channels) {
            assert_eq!(&a[..], &b[..750]);
        }
    }

    #[test]
    fn minmax_hits_unit_bounds() {
        let t = trial(9, |c, t| if c == 0 { t as f64 - 4.0 } else { (c * t) as f64 });
        let s = fit_scaler(std::slice::from_ref(&t), ScalerMode::MinMax).unwrap();
        let out = s.apply(&t);
        let ch0 = &out.channels[0];
        assert_eq!(ch0.iter().cloned().fold(f64::INFINITY, f64::min), -1.0);
        assert_eq!(ch0.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn standardize_moments_and_constant_channel() {
        let t = trial(400, |c, t| if c == 7 { 3.0 } else { 5.0 + 2.0 * if t % 2 == 0 { 1.0 } else { -1.0 } });
        let s = fit_scaler(std::slice::from_ref(&t), ScalerMode::Standardize).unwrap();
        assert!((s.params()[0].0 - 5.0).abs() < 1e-12 && (s.params()[0].1 - 2.0).abs() < 1e-12);
        let out = s.apply(&t);
        for (c, ch) in out.channels.iter().enumerate() {
            if c == 7 {
                assert!(ch.iter().all(|&v| v == 0.0));
                continue;
            }
            let n = ch.len() as f64;
            let m = ch.iter().sum::<f64>() / n;
            let sd = (ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_requires_data() {
        assert_eq!(fit_scaler(&[], ScalerMode::MinMax), Err(SignalError::EmptyTrainingSet));
    }

    #[test]
    fn trial_invariants() {
        assert_eq!(TrialRecording::new(0, 1, 0, 25.0, vec![vec![0.0]; 35]), Err(SignalError::ChannelCount(35)));
        assert_eq!(TrialRecording::new(0, 13, 0, 25.0, vec![vec![0.0]; 36]), Err(SignalError::Zone(13)));
        let mut ch = vec![vec![0.0; 4]; 36];
        ch[9].pop();
        assert!(matches!(TrialRecording::new(0, 1, 0, 25.0, ch), Err(SignalError::RaggedChannels { channel: 9, .. })));
    }

    proptest! {
        #[test]
        fn filter_is_linear(xs in prop::collection::vec(-10.0f64..10.0, 1..200), a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let f = BandpassFilter::default();
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, v)| v * 1.7 + (i as f64 + seed as f64).sin()).collect();
            let mix: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            let lhs = filter_channel(&mix, &f);
            let fx = filter_channel(&xs, &f);
            let fy = filter_channel(&ys, &f);
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn filter_is_time_invariant(xs in prop::collection::vec(-10.0f64..10.0, 1..100), k in 0usize..20) {
            let f = BandpassFilter::default();
            let mut delayed = vec![0.0; k];
            delayed.extend_from_slice(&xs);
            let y = filter_channel(&xs, &f);
            let yd = filter_channel(&delayed, &f);
            prop_assert!(yd[..k].iter().all(|&v| v == 0.0));
            prop_assert_eq!(&yd[k..], &y[..]);
        }

        #[test]
        fn pad_is_idempotent(frames in 1usize..60, target in 1usize..60) {
            let t = trial(frames, |c, t| (c as f64) - (t as f64) * 0.5);
            let once = pad_or_truncate(&t, target);
            prop_assert_eq!(pad_or_truncate(&once, target), once);
        }

        #[test]
        fn minmax_stays_in_bounds(vals in prop::collection::vec(-1e3f64..1e3, 36 * 5)) {
            let t = trial(5, |c, t| vals[c * 5 + t]);
            let s = fit_scaler(std::slice::from_ref(&t), ScalerMode::MinMax).unwrap();
            let out = s.apply(&t);
            prop_assert!(out.channels.iter().flatten().all(|v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(v)));
        }
    }
}
