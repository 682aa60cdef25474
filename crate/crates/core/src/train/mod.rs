//! Targets, losses, optimizer and the masked-modality training loop.

mod looping;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{interval_iou, EventInterval, EventLabel, ModalityMask};
use crate::dsp::EPOCH_S;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tape, Tensor};

pub use looping::{
    prediction_flips, prepare_epochs, train_loop, validate, EpochLog, TrainOutcome, TrainState,
    ValidationReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lambda_smooth: f64,
    pub modality_dropout_p: f64,
    /// Per-label loss weights; `None` derives them from the training split.
    pub class_weights: Option<[f64; EventLabel::COUNT]>,
    pub seed: u64,
    /// Spacing of training epochs within a recording, seconds.
    pub stride_s: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 8,
            epochs: 50,
            weight_decay: 1e-5,
            clip_norm: 5.0,
            lambda_smooth: 0.1,
            modality_dropout_p: 0.3,
            class_weights: None,
            seed: 0,
            stride_s: EPOCH_S,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lr0", self.lr0),
            ("lr_min", self.lr_min),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
            ("stride_s", self.stride_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_smooth", self.lambda_smooth),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.modality_dropout_p) {
            return bad(format!(
                "modality_dropout_p must lie in [0, 1), got {}",
                self.modality_dropout_p
            ));
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive".into());
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0)) {
                return bad(format!("class weights must be positive, got {w:?}"));
            }
        }
        Ok(())
    }
}

/// Interval templates tiling one epoch at several durations.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultWindows {
    /// `(onset_s, end_s)` in epoch-relative time, ordered by duration then onset.
    pub windows: Vec<(f64, f64)>,
}

impl DefaultWindows {
    pub const DURATIONS_S: [f64; 11] = [3.5, 4.5, 6.5, 10.0, 15.0, 20.0, 30.0, 45.0, 60.0, 90.0, 120.0];

    /// Windows of each duration `d` at stride `d/4`, the last one flush with the epoch end.
    pub fn new(durations_s: &[f64], epoch_s: f64) -> Self {
        let mut windows = Vec::new();
        for &d in durations_s {
            if d > epoch_s {
                continue;
            }
            let stride = d / 4.0;
            let mut k = 0usize;
            loop {
                let on = k as f64 * stride;
                if on + d > epoch_s + 1e-9 {
                    break;
                }
                windows.push((on, on + d));
                k += 1;
            }
            if let Some(&(_, end)) = windows.last() {
                if end < epoch_s - 1e-9 {
                    windows.push((epoch_s - d, epoch_s));
                }
            }
        }
        Self { windows }
    }

    pub fn standard() -> Self {
        Self::new(&Self::DURATIONS_S, EPOCH_S)
    }

    /// Index and IoU of the best window for `event` (ties go to the earlier window).
    pub fn best_match(&self, event: &EventInterval) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &(on, end)) in self.windows.iter().enumerate() {
            let w = EventInterval::truth(on, end, event.label).ok()?;
            let iou = interval_iou(&w, event);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((i, iou));
            }
        }
        best
    }
}

/// Minimum IoU between a true event and its window.
pub const MATCH_IOU: f64 = 0.2;

/// Dense multilabel targets `[T', 4]` for epoch-relative `events`, painting
/// each event's best default window. Events without a window at IoU ≥ 0.2
/// are returned as coverage failures and skipped.
pub fn build_targets(
    events: &[EventInterval],
    windows: &DefaultWindows,
    out_len: usize,
    bin_s: f64,
) -> (Tensor<f32>, Vec<EventInterval>) {
    let mut t = Tensor::zeros(&[out_len, EventLabel::COUNT]);
    let mut failures = Vec::new();
    for e in events {
        match windows.best_match(e) {
            Some((i, iou)) if iou >= MATCH_IOU => {
                let (on, end) = windows.windows[i];
                let k = e.label.index();
                let first = ((on / bin_s) - 0.5).ceil().max(0.0) as usize;
                for b in first..out_len {
                    let center = (b as f64 + 0.5) * bin_s;
                    if center >= end {
                        break;
                    }
                    t.data_mut()[b * EventLabel::COUNT + k] = 1.0;
                }
            }
            _ => {
                log::warn!("no default window covers {e:?}; event skipped");
                failures.push(*e);
            }
        }
    }
    (t, failures)
}

/// Weighted binary cross-entropy on logits, averaged over all entries;
/// `weights[k]` applies to column `k` of the last dimension.
pub fn bce_with_logits<F: Real>(logits: &Tensor<F>, targets: &Tensor<F>, weights: &[F]) -> Result<F> {
    let mut tape = Tape::new(0);
    let x = tape.constant(logits.clone());
    let l = tape.bce_with_logits(x, targets, weights)?;
    Ok(tape.value(l).item())
}

/// Mean absolute difference between consecutive time steps of `[B, T', K]`,
/// normalized by `B·(T'−1)·K`.
pub fn smoothness<F: Real>(seq: &Tensor<F>) -> Result<F> {
    if seq.rank() != 3 || seq.shape()[1] < 2 {
        return Err(Error::InvalidArgument(format!(
            "smoothness needs [B, T', K] with T' >= 2, got {:?}",
            seq.shape()
        )));
    }
    let mut tape = Tape::new(0);
    let x = tape.constant(seq.clone());
    let l = tape.mean_abs_diff(x)?;
    Ok(tape.value(l).item())
}

/// `BCE + λ · smoothness(sigmoid(logits))`.
pub fn total_loss<F: Real>(logits: &Tensor<F>, targets: &Tensor<F>, weights: &[F], lambda: F) -> Result<F> {
    let bce = bce_with_logits(logits, targets, weights)?;
    if lambda == F::zero() {
        return Ok(bce);
    }
    Ok(bce + lambda * smoothness(&logits.map(crate::tensor::sigmoid))?)
}

/// The same loss recorded on `tape`.
pub fn total_loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    logits: crate::tensor::Var,
    targets: &Tensor<F>,
    weights: &[F],
    lambda: F,
) -> Result<crate::tensor::Var> {
    let bce = tape.bce_with_logits(logits, targets, weights)?;
    if lambda == F::zero() {
        return Ok(bce);
    }
    let probs = tape.sigmoid(logits);
    let smooth = tape.mean_abs_diff(probs)?;
    let smooth = tape.scale(smooth, lambda);
    tape.add(bce, smooth)
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Number of completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam step at learning rate `lr`; weight decay enters
/// as the additive gradient term `weight_decay · θ`.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f32>], state: &mut AdamState, cfg: &TrainConfig, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (idx, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        for j in 0..p.len() {
            let theta = p[j] as f64;
            let g = grads[idx][j] as f64 + cfg.weight_decay * theta;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.adam_eps);
            p[j] = (theta - step) as f32;
        }
    }
}

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at `epochs`; held at
/// `lr_min` afterwards.
pub fn cosine_lr(epoch: f64, cfg: &TrainConfig) -> Result<f64> {
    if !(epoch >= 0.0) {
        return Err(Error::InvalidArgument(format!("epoch must be nonnegative, got {epoch}")));
    }
    let frac = (epoch / cfg.epochs as f64).min(1.0);
    Ok(cfg.lr_min + (cfg.lr0 - cfg.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = (*g as f64 * scale) as f32;
        }
    }
    norm
}

/// Drops each modality independently with probability `p`; draws again
/// whenever every modality was dropped.
pub fn sample_mask<R: Rng>(p: f64, rng: &mut R) -> ModalityMask {
    if p <= 0.0 {
        return ModalityMask::all();
    }
    loop {
        let mask = ModalityMask {
            flags: std::array::from_fn(|_| !rng.gen_bool(p)),
        };
        if mask.any() {
            return mask;
        }
    }
}

/// Inverse positive-bin frequency per label, renormalized to mean 1.
/// Frequencies are floored at 1e-3 so an absent label does not dominate.
pub fn inverse_frequency_weights<'a>(targets: impl IntoIterator<Item = &'a [f32]>) -> [f64; EventLabel::COUNT] {
    let mut pos = [0.0f64; EventLabel::COUNT];
    let mut rows = 0.0f64;
    for t in targets {
        for row in t.chunks_exact(EventLabel::COUNT) {
            rows += 1.0;
            for (k, &v) in row.iter().enumerate() {
                pos[k] += v as f64;
            }
        }
    }
    let inv: Vec<f64> = pos
        .iter()
        .map(|&p| 1.0 / (if rows > 0.0 { p / rows } else { 0.0 }).max(1e-3))
        .collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    std::array::from_fn(|k| inv[k] / mean)
}

#[cfg(test)]
mod tests;
