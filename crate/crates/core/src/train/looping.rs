use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, build_targets, clip_gradients, cosine_lr, inverse_frequency_weights, sample_mask,
    total_loss, total_loss_on_tape, AdamState, DefaultWindows, TrainConfig,
};
use crate::domain::{ChannelKind, EventInterval, EventLabel, ModalityMask, Recording};
use crate::dsp::{self, EpochBatch, EPOCH_SAMPLES, TARGET_HZ};
use crate::error::{Error, Result};
use crate::eval::{match_events, MatchResult};
use crate::events::{decode_epochs, valid_bins, DecodeConfig};
use crate::net::{Net, NetConfig};
use crate::tensor::{Checkpoint, Mode, Tape, Tensor};

/// Matching threshold used for the validation F1.
const VAL_IOU: f64 = 0.2;

/// Preprocesses and segments each recording, attaching dense targets.
/// Returns the epochs and every event that no default window covers.
pub fn prepare_epochs(
    recordings: &[Recording],
    stride_s: f64,
    windows: &DefaultWindows,
    net_cfg: &NetConfig,
) -> Result<(Vec<EpochBatch>, Vec<EventInterval>)> {
    let t_out = net_cfg.out_len();
    let bin_s = net_cfg.bin_s(TARGET_HZ);
    let mut epochs = Vec::new();
    let mut failures = Vec::new();
    for rec in recordings {
        let clean = dsp::preprocess(rec)?;
        for mut e in dsp::segment(&clean, stride_s)? {
            let (t, missed) = build_targets(&e.events, windows, t_out, bin_s);
            e.targets = Some(t.into_data());
            failures.extend(missed.into_iter().map(|m| m.shifted(e.start_s)));
            epochs.push(e);
        }
    }
    Ok((epochs, failures))
}

/// Network plus optimizer state; enough to resume training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: Net,
    pub adam: AdamState,
    /// Index of the next epoch to run.
    pub next_epoch: usize,
    /// Lowest validation loss seen so far.
    pub best_val_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    net: NetConfig,
    next_epoch: usize,
    adam_steps: u64,
    best_val_loss: Option<f64>,
}

impl TrainState {
    pub fn new(net_cfg: NetConfig, seed: u64) -> Result<Self> {
        let net = Net::new(net_cfg, seed)?;
        let adam = AdamState::new(&net.params);
        Ok(Self {
            net,
            adam,
            next_epoch: 0,
            best_val_loss: f64::INFINITY,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.net.to_checkpoint()?;
        for (idx, id) in self.net.params.ids().enumerate() {
            let name = self.net.params.name(id);
            let shape = self.net.params.get(id).shape().to_vec();
            ckpt.records
                .push((format!("adam.m.{name}"), Tensor::new(shape.clone(), self.adam.m[idx].clone())?));
            ckpt.records
                .push((format!("adam.v.{name}"), Tensor::new(shape, self.adam.v[idx].clone())?));
        }
        ckpt.metadata = serde_json::to_string(&StateMeta {
            net: self.net.cfg.clone(),
            next_epoch: self.next_epoch,
            adam_steps: self.adam.t,
            best_val_loss: self.best_val_loss.is_finite().then_some(self.best_val_loss),
        })?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: StateMeta = serde_json::from_str(&ckpt.metadata)?;
        let net_ckpt = Checkpoint {
            metadata: serde_json::to_string(&meta.net)?,
            records: ckpt.records.clone(),
        };
        let net = Net::from_checkpoint(&net_ckpt)?;
        let mut adam = AdamState::new(&net.params);
        adam.t = meta.adam_steps;
        for (idx, id) in net.params.ids().enumerate() {
            let name = net.params.name(id);
            for (which, buf) in [("m", &mut adam.m[idx]), ("v", &mut adam.v[idx])] {
                let key = format!("adam.{which}.{name}");
                let t = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
                if t.numel() != buf.len() {
                    return Err(Error::Format(format!("{key} has {} values, expected {}", t.numel(), buf.len())));
                }
                buf.copy_from_slice(t.data());
            }
        }
        Ok(Self {
            net,
            adam,
            next_epoch: meta.next_epoch,
            best_val_loss: meta.best_val_loss.unwrap_or(f64::INFINITY),
        })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
    /// Thresholded prediction flips summed over the validation epochs.
    pub val_flips: usize,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,val_loss,val_macro_f1";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{:.4}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.val_macro_f1
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Epoch and network with the lowest validation loss, when this call
    /// improved on the loss recorded in the incoming state.
    pub best: Option<(usize, Net)>,
    pub log: Vec<EpochLog>,
    pub class_weights: [f64; EventLabel::COUNT],
}

/// Validation loss, macro-F1 at IoU 0.2 and flip count for `epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    pub loss: f64,
    pub macro_f1: f64,
    pub flips: usize,
}

/// Counts changes of the thresholded prediction between adjacent bins of
/// `probs[T', 4]`, over the first `bins` rows.
pub fn prediction_flips(probs: &[f32], bins: usize, threshold: f64) -> usize {
    let k = EventLabel::COUNT;
    let rows: Vec<&[f32]> = probs.chunks_exact(k).take(bins).collect();
    rows.windows(2)
        .map(|w| {
            (0..k)
                .filter(|&j| (w[0][j] as f64 >= threshold) != (w[1][j] as f64 >= threshold))
                .count()
        })
        .sum()
}

fn stack(epochs: &[&EpochBatch], masks: Option<&[ModalityMask]>) -> Result<Tensor<f32>> {
    let per = ChannelKind::COUNT * EPOCH_SAMPLES;
    let mut data = Vec::with_capacity(epochs.len() * per);
    for (i, e) in epochs.iter().enumerate() {
        let start = data.len();
        data.extend_from_slice(&e.data);
        if let Some(masks) = masks {
            for kind in ChannelKind::ALL {
                if !masks[i].is_set(kind) {
                    let c = start + kind.index() * EPOCH_SAMPLES;
                    data[c..c + EPOCH_SAMPLES].fill(0.0);
                }
            }
        }
    }
    Tensor::new(vec![epochs.len(), ChannelKind::COUNT, EPOCH_SAMPLES], data)
}

fn stack_targets(epochs: &[&EpochBatch], t_out: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(epochs.len() * t_out * EventLabel::COUNT);
    for e in epochs {
        let t = e
            .targets
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("epoch has no targets; run prepare_epochs first".into()))?;
        data.extend_from_slice(t);
    }
    Tensor::new(vec![epochs.len(), t_out, EventLabel::COUNT], data)
}

/// Eval-mode loss, F1 and flips on prepared epochs with all modalities.
pub fn validate(
    net: &mut Net,
    epochs: &[EpochBatch],
    weights: &[f64; EventLabel::COUNT],
    lambda: f64,
    decode: &DecodeConfig,
    batch: usize,
) -> Result<ValidationReport> {
    let t_out = net.cfg.out_len();
    let bin_s = net.cfg.bin_s(TARGET_HZ);
    let w32 = weights.map(|w| w as f32);
    let mut loss_sum = 0.0;
    let mut matched = MatchResult::default();
    let mut flips = 0;
    for chunk in epochs.chunks(batch.max(1)) {
        let refs: Vec<&EpochBatch> = chunk.iter().collect();
        let x = stack(&refs, None)?;
        let logits = net.logits(&x, ModalityMask::all())?;
        let targets = stack_targets(&refs, t_out)?;
        loss_sum += total_loss(&logits, &targets, &w32, lambda as f32)? as f64 * chunk.len() as f64;
        let probs = logits.map(crate::tensor::sigmoid);
        let each = t_out * EventLabel::COUNT;
        for (e, p) in chunk.iter().zip(probs.data().chunks(each)) {
            let bins = valid_bins(e.valid_len, net.cfg.out_stride).min(t_out);
            flips += prediction_flips(p, bins, decode.prob_threshold);
            let map = Tensor::new(vec![bins, EventLabel::COUNT], p[..bins * EventLabel::COUNT].to_vec())?;
            let pred = decode_epochs(&[(0.0, map)], decode, bin_s)?;
            let truth: Vec<EventInterval> = e
                .events
                .iter()
                .filter(|t| t.duration_s >= decode.min_duration_s[t.label.index()])
                .copied()
                .collect();
            matched.accumulate(&match_events(&pred, &truth, VAL_IOU));
        }
    }
    Ok(ValidationReport {
        loss: if epochs.is_empty() { 0.0 } else { loss_sum / epochs.len() as f64 },
        macro_f1: matched.macro_f1(),
        flips,
    })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs epochs `state.next_epoch..cfg.epochs` of minibatch training.
///
/// `on_epoch` sees each finished epoch's log row and the current state (for
/// checkpointing). A non-finite loss aborts with [`Error::Divergence`].
pub fn train_loop(
    train: &[EpochBatch],
    val: &[EpochBatch],
    mut state: TrainState,
    cfg: &TrainConfig,
    decode: &DecodeConfig,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    decode.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let t_out = state.net.cfg.out_len();
    let weights = match cfg.class_weights {
        Some(w) => w,
        None => {
            let mut all = Vec::with_capacity(train.len());
            for e in train {
                all.push(
                    e.targets
                        .as_deref()
                        .ok_or_else(|| Error::InvalidArgument("epoch has no targets".into()))?,
                );
            }
            inverse_frequency_weights(all)
        }
    };
    log::info!("class weights {weights:?}");
    let w32 = weights.map(|w| w as f32);

    let mut log_rows = Vec::new();
    let mut best: Option<(usize, Net)> = None;
    while state.next_epoch < cfg.epochs {
        let epoch = state.next_epoch;
        let lr = cosine_lr(epoch as f64, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64 + 1, 0));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let refs: Vec<&EpochBatch> = idx.iter().map(|&i| &train[i]).collect();
            let masks: Vec<ModalityMask> = refs
                .iter()
                .map(|_| sample_mask(cfg.modality_dropout_p, &mut rng))
                .collect();
            let x = stack(&refs, Some(&masks))?;
            let targets = stack_targets(&refs, t_out)?;

            let mut tape = Tape::<f32>::new(mix(cfg.seed, epoch as u64 + 1, bi as u64 + 1));
            let params = state.net.bind(&mut tape, true);
            let xv = tape.constant(x);
            let out = state.net.forward(&mut tape, &params, xv, ModalityMask::all(), Mode::Train)?;
            let loss = total_loss_on_tape(&mut tape, out.logits, &targets, &w32, cfg.lambda_smooth as f32)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            let mut grads = tape.backward(loss)?;
            let mut flat: Vec<Vec<f32>> = params
                .iter()
                .zip(state.net.params.ids())
                .map(|(&v, id)| {
                    grads
                        .take(v)
                        .unwrap_or_else(|| vec![0.0; state.net.params.get(id).numel()])
                })
                .collect();
            let norm = clip_gradients(&mut flat, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: norm,
                });
            }
            adam_step(&mut state.net.params, &flat, &mut state.adam, cfg, lr);
            loss_sum += value * refs.len() as f64;
            log::debug!("epoch {epoch} batch {bi} loss {value:.5} grad norm {norm:.3}");
        }
        let train_loss = loss_sum / train.len() as f64;
        let report = if val.is_empty() {
            ValidationReport {
                loss: train_loss,
                macro_f1: f64::NAN,
                flips: 0,
            }
        } else {
            validate(&mut state.net, val, &weights, cfg.lambda_smooth, decode, cfg.batch)?
        };
        state.next_epoch += 1;
        let row = EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss: report.loss,
            val_macro_f1: report.macro_f1,
            val_flips: report.flips,
        };
        log::info!("{}", row.csv_line());
        if report.loss < state.best_val_loss {
            state.best_val_loss = report.loss;
            best = Some((epoch, state.net.clone()));
        }
        on_epoch(&row, &state)?;
        log_rows.push(row);
    }
    Ok(TrainOutcome {
        state,
        best,
        log: log_rows,
        class_weights: weights,
    })
}
