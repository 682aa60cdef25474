//! Preprocessing: resample → band-pass (EEG) → z-score → segment.

mod filter;
mod resample;

pub use filter::{butterworth_bandpass, filtfilt, Biquad, BUTTER4_Q};
pub use resample::resample;

use crate::domain::{ChannelKind, EventInterval, ModalityMask, Recording, SampleSeries};
use crate::error::{Error, Result};

/// Common rate of every channel after preprocessing.
pub const TARGET_HZ: f64 = 100.0;
/// Epoch length in seconds.
pub const EPOCH_S: f64 = 250.0;
/// Samples per channel in one epoch.
pub const EPOCH_SAMPLES: usize = 25_000;
/// Recordings shorter than this cannot be segmented.
pub const MIN_RECORDING_S: f64 = 10.0;

pub const EEG_LOW_HZ: f64 = 0.5;
pub const EEG_HIGH_HZ: f64 = 45.0;
/// Reflection padding for zero-phase filtering (10 s at 100 Hz).
const FILTFILT_PAD: usize = 1000;

/// Zero-mean, unit population-variance copy of `series`.
pub fn zscore(series: &SampleSeries) -> Result<SampleSeries> {
    let n = series.samples.len();
    if n < 2 {
        return Err(Error::DegenerateSignal(format!(
            "{} channel has {n} sample(s); z-score needs at least 2",
            series.kind
        )));
    }
    let mean = series.samples.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = series
        .samples
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 1e-12 * (1.0 + mean.abs())) {
        return Err(Error::DegenerateSignal(format!(
            "{} channel has zero variance",
            series.kind
        )));
    }
    let samples = series
        .samples
        .iter()
        .map(|&v| ((v as f64 - mean) / std) as f32)
        .collect();
    SampleSeries::new(series.kind, series.rate_hz, samples)
}

/// Zero-phase 0.5–45 Hz band-pass for a 100 Hz EEG channel.
pub fn bandpass_eeg(series: &SampleSeries) -> Result<SampleSeries> {
    if series.kind != ChannelKind::Eeg {
        return Err(Error::InvalidArgument(format!(
            "band-pass applies to EEG only, got {}",
            series.kind
        )));
    }
    if (series.rate_hz - TARGET_HZ).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "EEG band-pass expects {TARGET_HZ} Hz input, got {} Hz",
            series.rate_hz
        )));
    }
    let sections = butterworth_bandpass(EEG_LOW_HZ, EEG_HIGH_HZ, TARGET_HZ);
    let x: Vec<f64> = series.samples.iter().map(|&v| v as f64).collect();
    let y = filtfilt(&sections, &x, FILTFILT_PAD);
    SampleSeries::new(series.kind, series.rate_hz, y.into_iter().map(|v| v as f32).collect())
}

/// Full per-recording preprocessing in its fixed order.
///
/// Event annotations and total sleep time are carried over unchanged.
pub fn preprocess(rec: &Recording) -> Result<Recording> {
    let mut channels = Vec::with_capacity(rec.channels.len());
    for ch in &rec.channels {
        let mut s = resample(ch, TARGET_HZ)?;
        if s.kind == ChannelKind::Eeg {
            s = bandpass_eeg(&s)?;
        }
        channels.push(zscore(&s)?);
    }
    let mut out = Recording::new(rec.id.clone(), channels)?;
    out.total_sleep_time_min = rec.total_sleep_time_min;
    out.annotations = rec.annotations.clone();
    Ok(out)
}

/// Thresholds for [`quality_check`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityConfig {
    /// Robust z-score above which a sample counts as an artifact.
    pub z_limit: f64,
    /// Largest tolerated fraction of artifact samples per channel.
    pub artifact_budget: f64,
    /// Channels that must be present.
    pub required: ModalityMask,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            z_limit: 6.0,
            artifact_budget: 0.05,
            required: ModalityMask::all(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Quality {
    Accept,
    Reject(String),
}

impl Quality {
    pub fn is_accept(&self) -> bool {
        matches!(self, Quality::Accept)
    }
}

fn median(v: &mut [f64]) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Smallest scale used for robust z-scores, in channel units. SpO2 is
/// quantized to whole percent by oximeters, so a flat trace must not turn
/// every desaturation into an outlier.
fn scale_floor(kind: ChannelKind) -> f64 {
    match kind {
        ChannelKind::Spo2 => 1.0,
        _ => 1e-9,
    }
}

/// Exclusion screen run on the raw recording.
///
/// Outliers are measured with a robust z-score, `(x − median) / (1.4826·MAD)`,
/// so a large block of corrupted samples cannot hide itself by inflating
/// the scale estimate.
pub fn quality_check(rec: &Recording, cfg: &QualityConfig) -> Quality {
    for kind in cfg.required.kinds() {
        if !rec.has(kind) {
            return Quality::Reject(format!("missing channel: {kind}"));
        }
    }
    if rec.total_sleep_time_min.is_none() {
        return Quality::Reject("missing total sleep time".into());
    }
    for ch in &rec.channels {
        if ch.samples.is_empty() || !ch.is_finite() {
            return Quality::Reject(format!("non-finite samples in {} channel", ch.kind));
        }
        let mut vals: Vec<f64> = ch.samples.iter().map(|&v| v as f64).collect();
        let med = median(&mut vals);
        let mut dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
        let mad = median(&mut dev);
        let scale = (1.4826 * mad).max(scale_floor(ch.kind));
        let outliers = ch
            .samples
            .iter()
            .filter(|&&v| ((v as f64 - med) / scale).abs() > cfg.z_limit)
            .count();
        let frac = outliers as f64 / ch.samples.len() as f64;
        if frac > cfg.artifact_budget {
            return Quality::Reject(format!(
                "artifact budget exceeded: {:.1}% of {} samples beyond |z| = {}",
                100.0 * frac,
                ch.kind,
                cfg.z_limit
            ));
        }
    }
    Quality::Accept
}

/// One fixed-length multichannel window.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochBatch {
    /// Channel-major `[3, EPOCH_SAMPLES]`; absent or masked channels are zero.
    pub data: Vec<f32>,
    pub mask: ModalityMask,
    /// Offset of the epoch from the recording start, seconds.
    pub start_s: f64,
    /// Samples carrying real signal; the rest is right padding.
    pub valid_len: usize,
    /// Annotations clipped to the epoch, in epoch-relative time.
    pub events: Vec<EventInterval>,
    /// Dense `[T', 4]` targets, filled in by training.
    pub targets: Option<Vec<f32>>,
}

impl EpochBatch {
    pub fn channel(&self, kind: ChannelKind) -> &[f32] {
        let i = kind.index();
        &self.data[i * EPOCH_SAMPLES..(i + 1) * EPOCH_SAMPLES]
    }

    /// Zeroes every channel not set in `mask` and records the mask.
    pub fn apply_mask(&mut self, mask: ModalityMask) {
        for kind in ChannelKind::ALL {
            if !mask.is_set(kind) {
                let i = kind.index();
                self.data[i * EPOCH_SAMPLES..(i + 1) * EPOCH_SAMPLES].fill(0.0);
            }
        }
        self.mask = ModalityMask {
            flags: std::array::from_fn(|i| self.mask.flags[i] && mask.flags[i]),
        };
    }

    pub fn valid_s(&self) -> f64 {
        self.valid_len as f64 / TARGET_HZ
    }
}

/// Number of epochs covering `duration_s` with the given stride.
pub fn epoch_count(duration_s: f64, epoch_s: f64, stride_s: f64) -> usize {
    1 + ((duration_s - epoch_s).max(0.0) / stride_s - 1e-9).ceil().max(0.0) as usize
}

/// Cuts a preprocessed 100 Hz recording into epochs of `EPOCH_S` seconds.
///
/// Epoch `k` starts at `k·stride_s`; the last epoch reaches the end of the
/// recording and is zero-padded on the right.
pub fn segment(rec: &Recording, stride_s: f64) -> Result<Vec<EpochBatch>> {
    if !(stride_s.is_finite() && stride_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "stride must be positive, got {stride_s}"
        )));
    }
    for ch in &rec.channels {
        if (ch.rate_hz - TARGET_HZ).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "segment expects {TARGET_HZ} Hz channels, {} is at {} Hz",
                ch.kind, ch.rate_hz
            )));
        }
    }
    let total = rec.channels.iter().map(|c| c.samples.len()).max().unwrap_or(0);
    let duration = total as f64 / TARGET_HZ;
    if duration < MIN_RECORDING_S {
        return Err(Error::TooShort(format!(
            "recording {} lasts {duration:.1} s; at least {MIN_RECORDING_S} s needed",
            rec.id
        )));
    }
    let mask = rec.available();
    let count = epoch_count(duration, EPOCH_S, stride_s);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start_s = k as f64 * stride_s;
        let start = (start_s * TARGET_HZ).round() as usize;
        let valid_len = total.saturating_sub(start).min(EPOCH_SAMPLES);
        let mut data = vec![0.0f32; ChannelKind::COUNT * EPOCH_SAMPLES];
        for ch in &rec.channels {
            let i = ch.kind.index();
            let src = ch.samples.get(start..).unwrap_or(&[]);
            let n = src.len().min(EPOCH_SAMPLES);
            data[i * EPOCH_SAMPLES..i * EPOCH_SAMPLES + n].copy_from_slice(&src[..n]);
        }
        let end_s = start_s + valid_len as f64 / TARGET_HZ;
        let events = rec
            .annotations
            .iter()
            .filter_map(|e| e.clipped(start_s, end_s))
            .map(|e| e.shifted(-start_s))
            .collect();
        out.push(EpochBatch {
            data,
            mask,
            start_s,
            valid_len,
            events,
            targets: None,
        });
    }
    Ok(out)
}
