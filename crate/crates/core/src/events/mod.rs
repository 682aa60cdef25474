//! From dense per-bin probabilities to discrete, non-redundant events.

use serde::{Deserialize, Serialize};

use crate::domain::{interval_iou, ChannelKind, EventInterval, EventLabel, ModalityMask, Recording};
use crate::dsp::{self, EPOCH_S, EPOCH_SAMPLES, TARGET_HZ};
use crate::error::{Error, Result};
use crate::net::Net;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Minimum mean in-run probability of an emitted event.
    pub prob_threshold: f64,
    /// Bins at or above this probability form candidate runs.
    pub support_threshold: f64,
    /// Per label, in [`EventLabel`] order.
    pub min_duration_s: [f64; EventLabel::COUNT],
    pub merge_gap_s: f64,
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            prob_threshold: 0.5,
            support_threshold: 0.5,
            min_duration_s: [10.0, 10.0, 3.0, 3.0],
            merge_gap_s: 1.0,
            nms_iou: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("prob_threshold", self.prob_threshold),
            ("support_threshold", self.support_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.min_duration_s.iter().any(|d| !(*d >= 0.0)) || !(self.merge_gap_s >= 0.0) {
            return bad("durations and merge gap must be nonnegative".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad(format!("nms_iou must lie in (0, 1], got {}", self.nms_iou));
        }
        Ok(())
    }
}

/// Decodes `probs[T', 4]` (bins of `bin_s` seconds) into events offset by
/// `epoch_start_s`.
///
/// Per label: bins with probability ≥ `support_threshold` form runs; runs
/// separated by less than `merge_gap_s` are merged; runs shorter than the
/// label's minimum duration are dropped; the score is the mean probability
/// of the run's supporting bins and runs scoring below `prob_threshold` are
/// dropped. Because the runs do not depend on `prob_threshold`, raising it
/// can only remove events.
pub fn decode(probs: &Tensor<f32>, cfg: &DecodeConfig, epoch_start_s: f64, bin_s: f64) -> Vec<EventInterval> {
    let shape = probs.shape();
    debug_assert!(shape.len() == 2 && shape[1] == EventLabel::COUNT);
    let bins = shape[0];
    let mut out = Vec::new();
    for label in EventLabel::ALL {
        let k = label.index();
        let p = |t: usize| probs.data()[t * EventLabel::COUNT + k] as f64;
        // (first bin, end bin exclusive, probability sum, supporting bins)
        let mut runs: Vec<(usize, usize, f64, usize)> = Vec::new();
        let mut t = 0;
        while t < bins {
            if p(t) < cfg.support_threshold {
                t += 1;
                continue;
            }
            let start = t;
            let mut sum = 0.0;
            while t < bins && p(t) >= cfg.support_threshold {
                sum += p(t);
                t += 1;
            }
            match runs.last_mut() {
                Some(last) if (start - last.1) as f64 * bin_s < cfg.merge_gap_s => {
                    last.1 = t;
                    last.2 += sum;
                    last.3 += t - start;
                }
                _ => runs.push((start, t, sum, t - start)),
            }
        }
        for (start, end, sum, n) in runs {
            let duration = (end - start) as f64 * bin_s;
            let score = (sum / n as f64).clamp(0.0, 1.0);
            if duration + 1e-9 < cfg.min_duration_s[k] || score < cfg.prob_threshold {
                continue;
            }
            let onset = epoch_start_s + start as f64 * bin_s;
            if let Ok(e) = EventInterval::from_onset(onset, duration, label, score) {
                out.push(e);
            }
        }
    }
    out
}

/// Greedy per-label non-maximum suppression.
///
/// Within a label, events are visited by descending score (ties: earlier
/// onset, then longer duration) and kept unless their IoU with an already
/// kept event exceeds `iou_threshold`. Output is sorted by onset.
pub fn nms(events: &[EventInterval], iou_threshold: f64) -> Vec<EventInterval> {
    let mut order: Vec<&EventInterval> = events.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.onset_s().total_cmp(&b.onset_s()))
            .then(b.duration_s.total_cmp(&a.duration_s))
    });
    let mut kept: Vec<EventInterval> = Vec::new();
    for e in order {
        let suppressed = kept
            .iter()
            .any(|k| k.label == e.label && interval_iou(k, e) > iou_threshold);
        if !suppressed {
            kept.push(*e);
        }
    }
    sort_events(&mut kept);
    kept
}

pub(crate) fn sort_events(events: &mut [EventInterval]) {
    events.sort_by(|a, b| {
        a.onset_s()
            .total_cmp(&b.onset_s())
            .then(a.label.index().cmp(&b.label.index()))
            .then(a.duration_s.total_cmp(&b.duration_s))
    });
}

/// Joins per-epoch detections (absolute times) into one list, merging
/// same-label events that touch or come within `merge_gap_s` of each other
/// across epoch boundaries. Merged scores are duration-weighted means.
pub fn stitch_epochs(per_epoch: &[(f64, Vec<EventInterval>)], merge_gap_s: f64) -> Result<Vec<EventInterval>> {
    let starts: Vec<f64> = per_epoch.iter().map(|(s, _)| *s).collect();
    if let Some(w) = starts.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "epochs must be in temporal order, got start {} after {}",
            w[1], w[0]
        )));
    }
    if starts.len() > 2 {
        let stride = starts[1] - starts[0];
        if stride < EPOCH_S && starts.windows(2).any(|w| ((w[1] - w[0]) - stride).abs() > 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "overlapping epochs need a constant stride; first stride is {stride} s"
            )));
        }
    }
    let mut all: Vec<EventInterval> = per_epoch.iter().flat_map(|(_, e)| e.iter().copied()).collect();
    all.sort_by(|a, b| {
        a.label
            .index()
            .cmp(&b.label.index())
            .then(a.onset_s().total_cmp(&b.onset_s()))
    });
    let mut out: Vec<EventInterval> = Vec::with_capacity(all.len());
    for e in all {
        if let Some(last) = out.last_mut() {
            if last.label == e.label && e.onset_s() - last.end_s() < merge_gap_s {
                let on = last.onset_s();
                let end = last.end_s().max(e.end_s());
                let score = (last.score * last.duration_s + e.score * e.duration_s) / (last.duration_s + e.duration_s);
                *last = EventInterval::from_onset(on, end - on, e.label, score.clamp(0.0, 1.0))?;
                continue;
            }
        }
        out.push(e);
    }
    sort_events(&mut out);
    Ok(out)
}

/// Drops events shorter than their label's minimum duration.
pub fn filter_min_duration(events: Vec<EventInterval>, cfg: &DecodeConfig) -> Vec<EventInterval> {
    events
        .into_iter()
        .filter(|e| e.duration_s + 1e-9 >= cfg.min_duration_s[e.label.index()])
        .collect()
}

/// Decodes consecutive epoch maps `(start_s, probs)` into one event list:
/// per-epoch runs are stitched across boundaries before the duration floor
/// is applied, so an event split by a boundary is judged by its full length.
pub fn decode_epochs(maps: &[(f64, Tensor<f32>)], cfg: &DecodeConfig, bin_s: f64) -> Result<Vec<EventInterval>> {
    let loose = DecodeConfig {
        min_duration_s: [0.0; EventLabel::COUNT],
        ..cfg.clone()
    };
    let per_epoch: Vec<(f64, Vec<EventInterval>)> = maps
        .iter()
        .map(|(start, p)| (*start, decode(p, &loose, *start, bin_s)))
        .collect();
    let stitched = stitch_epochs(&per_epoch, cfg.merge_gap_s)?;
    Ok(filter_min_duration(stitched, cfg))
}

/// Number of output bins that cover real signal in an epoch of `valid_len` samples.
pub fn valid_bins(valid_len: usize, out_stride: usize) -> usize {
    valid_len.div_ceil(out_stride)
}

/// Full inference on a raw recording: preprocess, run the network on
/// consecutive epochs, decode, stitch and suppress duplicates.
///
/// Channels outside `mask` are zero-filled; a channel requested by `mask`
/// but absent from the recording is a [`Error::MissingModality`].
pub fn detect_recording(
    net: &mut Net,
    rec: &Recording,
    mask: ModalityMask,
    cfg: &DecodeConfig,
    batch: usize,
) -> Result<Vec<EventInterval>> {
    mask.validate()?;
    cfg.validate()?;
    if net.cfg.input_len != EPOCH_SAMPLES {
        return Err(Error::Config(format!(
            "network input length {} does not match the {EPOCH_SAMPLES}-sample epoch",
            net.cfg.input_len
        )));
    }
    for kind in mask.kinds() {
        if !rec.has(kind) {
            return Err(Error::MissingModality(format!(
                "mask requests {kind} but recording {} has no such channel",
                rec.id
            )));
        }
    }
    let clean = dsp::preprocess(rec)?;
    let mut epochs = dsp::segment(&clean, EPOCH_S)?;
    for e in &mut epochs {
        e.apply_mask(mask);
    }
    let probs = predict_epochs(net, &epochs, batch.max(1))?;
    let bin_s = net.cfg.bin_s(TARGET_HZ);
    let t_out = net.cfg.out_len();
    let maps: Vec<(f64, Tensor<f32>)> = epochs
        .iter()
        .zip(probs)
        .map(|(e, mut p)| {
            let bins = valid_bins(e.valid_len, net.cfg.out_stride).min(t_out);
            p.truncate(bins * EventLabel::COUNT);
            (e.start_s, Tensor::new(vec![bins, EventLabel::COUNT], p).expect("valid bins fit the map"))
        })
        .collect();
    let events = decode_epochs(&maps, cfg, bin_s)?;
    Ok(nms(&events, cfg.nms_iou))
}

/// Eval-mode probability maps `[T', 4]` (flattened) for each epoch.
pub fn predict_epochs(net: &mut Net, epochs: &[dsp::EpochBatch], batch: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(epochs.len());
    let per = ChannelKind::COUNT * EPOCH_SAMPLES;
    for chunk in epochs.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * per);
        for e in chunk {
            data.extend_from_slice(&e.data);
        }
        let x = Tensor::new(vec![chunk.len(), ChannelKind::COUNT, EPOCH_SAMPLES], data)?;
        let probs = net.predict(&x, ModalityMask::all())?;
        let each = probs.numel() / chunk.len();
        out.extend(probs.data().chunks(each).map(<[f32]>::to_vec));
    }
    Ok(out)
}
