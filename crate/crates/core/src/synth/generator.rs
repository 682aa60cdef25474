use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};

use super::{GeneratorConfig, AIRFLOW_HZ, EEG_HZ, SPO2_HZ};
use crate::domain::{ChannelKind, EventInterval, EventLabel, Recording, SampleSeries};
use crate::dsp::{butterworth_bandpass, filtfilt};
use crate::error::Result;

const BREATH_PERIOD_S: f64 = 4.0;
/// No events in the first minute, so every event has a full baseline window.
const LEAD_IN_S: f64 = 60.0;
const TAIL_S: f64 = 30.0;
const RESP_MIN_S: f64 = 12.0;
const RESP_MAX_S: f64 = 30.0;
/// Reserved before a respiratory event and for snapping it to breath starts.
const RESP_PRE_S: f64 = 5.0;
const SNAP_MARGIN_S: f64 = 2.5 * BREATH_PERIOD_S;
/// Quiet time kept around spontaneous events.
const GUARD_S: f64 = 15.0;

const EEG_RMS: f64 = 20.0;
const AROUSAL_RMS: f64 = 50.0;
const ALPHA_AMP: f64 = 15.0;
const ALPHA_BURSTS_PER_MIN: f64 = 3.0;

const DESAT_FALL_PER_S: f64 = 0.4;
const DESAT_RISE_PER_S: f64 = 1.0;
/// Drop (percentage points) that defines the annotated desaturation span.
const DESAT_SCORE_PCT: f64 = 3.0;

/// SpO2 trace of one desaturation: linear fall from `t0` until `hold_end`
/// (capped at `depth`), then linear recovery.
#[derive(Debug, Clone, Copy)]
struct Desat {
    t0: f64,
    hold_end: f64,
    depth: f64,
}

impl Desat {
    fn reached(&self) -> f64 {
        self.depth.min(DESAT_FALL_PER_S * (self.hold_end - self.t0))
    }

    fn drop_at(&self, t: f64) -> f64 {
        if t <= self.t0 {
            0.0
        } else if t <= self.hold_end {
            self.depth.min(DESAT_FALL_PER_S * (t - self.t0))
        } else {
            (self.reached() - DESAT_RISE_PER_S * (t - self.hold_end)).max(0.0)
        }
    }

    fn end(&self) -> f64 {
        self.hold_end + self.reached() / DESAT_RISE_PER_S
    }

    /// Span where the drop is at least the scoring threshold.
    fn scored(&self) -> (f64, f64) {
        (
            self.t0 + DESAT_SCORE_PCT / DESAT_FALL_PER_S,
            self.hold_end + (self.reached() - DESAT_SCORE_PCT) / DESAT_RISE_PER_S,
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Arousal {
    onset: f64,
    duration: f64,
}

struct RespPlan {
    label: EventLabel,
    duration: f64,
    drop: f64,
    desat_depth: Option<f64>,
    /// (onset relative to event end, duration)
    arousal: Option<(f64, f64)>,
}

impl RespPlan {
    /// Time after the event end that must stay free of other events.
    fn post(&self, delay: f64) -> f64 {
        let desat = self
            .desat_depth
            .map_or(0.0, |d| delay + d / DESAT_RISE_PER_S + 5.0);
        let arousal = self.arousal.map_or(0.0, |(off, dur)| off + dur + GUARD_S);
        desat.max(arousal).max(10.0)
    }

    fn footprint(&self, delay: f64) -> f64 {
        RESP_PRE_S + self.duration + SNAP_MARGIN_S + self.post(delay)
    }
}

struct Breath {
    start: f64,
    period: f64,
    amp: f64,
    factor: f64,
}

fn overlaps(busy: &[(f64, f64)], a: f64, b: f64) -> bool {
    busy.iter().any(|&(s, e)| a < e && s < b)
}

/// Pink (1/f) noise, Kellet's economy filter bank, scaled to unit RMS.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.sample(StandardNormal);
        b[0] = 0.99886 * b[0] + w * 0.055_517_9;
        b[1] = 0.99332 * b[1] + w * 0.075_075_9;
        b[2] = 0.96900 * b[2] + w * 0.153_852;
        b[3] = 0.86650 * b[3] + w * 0.310_485_6;
        b[4] = 0.55000 * b[4] + w * 0.532_952_2;
        b[5] = -0.7616 * b[5] - w * 0.016_898;
        out.push(b[..6].iter().sum::<f64>() + b[6] + w * 0.5362);
        b[6] = w * 0.115_926;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Raised-cosine edges of `ramp` samples at both ends.
fn taper(i: usize, n: usize, ramp: usize) -> f64 {
    let k = i.min(n - 1 - i);
    if k >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * k as f64 / ramp as f64).cos()
    }
}

/// Builds one synthetic recording with exact annotations.
pub fn generate(cfg: &GeneratorConfig) -> Result<Recording> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dur = cfg.duration_min * 60.0;
    let hours = cfg.duration_min / 60.0;

    // breathing schedule; cycles start at upward zero crossings
    let mut breaths = Vec::new();
    let mut t = 0.0;
    while t < dur + BREATH_PERIOD_S * 2.0 {
        let period = BREATH_PERIOD_S * rng.gen_range(0.88..1.12);
        let amp = rng.gen_range(0.9..1.1);
        breaths.push(Breath {
            start: t,
            period,
            amp,
            factor: 1.0,
        });
        t += period;
    }
    let starts: Vec<f64> = breaths.iter().map(|b| b.start).collect();

    // respiratory event plans
    let mut plans = Vec::new();
    for (label, rate) in [
        (EventLabel::Apnea, cfg.event_rate_per_h.apnea),
        (EventLabel::Hypopnea, cfg.event_rate_per_h.hypopnea),
    ] {
        let n = poisson(&mut rng, rate * hours);
        for _ in 0..n {
            let duration = rng.gen_range(RESP_MIN_S..RESP_MAX_S);
            let (drop, desat, arousal) = if label == EventLabel::Apnea {
                let hi = (cfg.apnea_drop_frac + 0.04).min(0.99);
                let drop = rng.gen_range(cfg.apnea_drop_frac..hi.max(cfg.apnea_drop_frac + 1e-6));
                (
                    drop,
                    rng.gen_bool(cfg.apnea_desat_prob),
                    rng.gen_bool(cfg.apnea_arousal_prob),
                )
            } else {
                let hi = (cfg.hypopnea_drop_frac + 0.1).min(0.8);
                let drop = rng.gen_range(cfg.hypopnea_drop_frac..hi.max(cfg.hypopnea_drop_frac + 1e-6));
                let desat = rng.gen_bool(cfg.hypopnea_desat_prob);
                let arousal = !desat || rng.gen_bool(cfg.hypopnea_arousal_prob);
                (drop, desat, arousal)
            };
            let desat_depth = desat.then(|| rng.gen_range(cfg.desat_drop_pct..cfg.desat_drop_pct + 3.0));
            let arousal = arousal.then(|| {
                (
                    rng.gen_range(-1.0..2.0),
                    rng.gen_range(cfg.arousal_min_s + 1.0..cfg.arousal_min_s + 10.0),
                )
            });
            plans.push(RespPlan {
                label,
                duration,
                drop,
                desat_depth,
                arousal,
            });
        }
    }
    plans.shuffle(&mut rng);

    // hard-core placement: uniform random spacings between footprints
    let delay = cfg.desat_delay_s;
    let available = dur - LEAD_IN_S - TAIL_S;
    while plans.iter().map(|p| p.footprint(delay)).sum::<f64>() > available {
        let dropped = plans.pop();
        log::debug!("event density saturated; dropping a planned {:?}", dropped.map(|p| p.label));
    }
    let slack = available - plans.iter().map(|p| p.footprint(delay)).sum::<f64>();
    let raw: Vec<f64> = (0..=plans.len()).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = raw.iter().sum();
    let gaps: Vec<f64> = raw.iter().map(|g| g / total * slack).collect();

    let mut annotations = Vec::new();
    let mut desats: Vec<Desat> = Vec::new();
    let mut arousals: Vec<Arousal> = Vec::new();
    let mut busy: Vec<(f64, f64)> = Vec::new();
    let mut cursor = LEAD_IN_S + gaps[0];
    for (i, plan) in plans.iter().enumerate() {
        let proposal = cursor + RESP_PRE_S;
        let first = starts.partition_point(|&s| s < proposal);
        let onset = starts[first];
        let last = starts.partition_point(|&s| s < onset + plan.duration);
        let end = starts[last];
        for b in &mut breaths[first..last] {
            b.factor = 1.0 - plan.drop;
        }
        annotations.push(EventInterval::truth(onset, end, plan.label)?);
        if let Some(depth) = plan.desat_depth {
            let d = Desat {
                t0: onset + delay,
                hold_end: end + delay,
                depth,
            };
            let (a, b) = d.scored();
            annotations.push(EventInterval::truth(a, b, EventLabel::Desaturation)?);
            desats.push(d);
        }
        if let Some((off, len)) = plan.arousal {
            let a = Arousal {
                onset: end + off,
                duration: len,
            };
            annotations.push(EventInterval::from_onset(a.onset, len, EventLabel::Arousal, 1.0)?);
            arousals.push(a);
        }
        busy.push((onset - RESP_PRE_S, end + plan.post(delay)));
        cursor += plan.footprint(delay) + gaps[i + 1];
    }

    // spontaneous arousals and desaturations in the remaining free time
    let lo = LEAD_IN_S;
    let hi = dur - TAIL_S;
    for _ in 0..poisson(&mut rng, cfg.event_rate_per_h.arousal * hours) {
        let len = rng.gen_range(cfg.arousal_min_s + 1.0..cfg.arousal_min_s + 10.0);
        for _ in 0..100 {
            let onset = rng.gen_range(lo..hi - len);
            if !overlaps(&busy, onset - GUARD_S, onset + len + GUARD_S) {
                busy.push((onset - GUARD_S, onset + len + GUARD_S));
                arousals.push(Arousal {
                    onset,
                    duration: len,
                });
                annotations.push(EventInterval::from_onset(onset, len, EventLabel::Arousal, 1.0)?);
                break;
            }
        }
    }
    for _ in 0..poisson(&mut rng, cfg.event_rate_per_h.desaturation * hours) {
        let depth = rng.gen_range(cfg.desat_drop_pct..cfg.desat_drop_pct + 3.0);
        let hold = rng.gen_range(3.0..12.0);
        let span = depth / DESAT_FALL_PER_S + hold + depth / DESAT_RISE_PER_S;
        for _ in 0..100 {
            let t0 = rng.gen_range(lo..hi - span);
            if !overlaps(&busy, t0 - GUARD_S, t0 + span + GUARD_S) {
                busy.push((t0 - GUARD_S, t0 + span + GUARD_S));
                let d = Desat {
                    t0,
                    hold_end: t0 + depth / DESAT_FALL_PER_S + hold,
                    depth,
                };
                let (a, b) = d.scored();
                annotations.push(EventInterval::truth(a, b, EventLabel::Desaturation)?);
                desats.push(d);
                break;
            }
        }
    }
    annotations.sort_by(|a, b| {
        a.onset_s()
            .total_cmp(&b.onset_s())
            .then(a.label.index().cmp(&b.label.index()))
    });

    // airflow
    let n_air = (dur * AIRFLOW_HZ).round() as usize;
    let mut air = Vec::with_capacity(n_air);
    let mut c = 0;
    for k in 0..n_air {
        let t = k as f64 / AIRFLOW_HZ;
        while c + 1 < breaths.len() && breaths[c + 1].start <= t {
            c += 1;
        }
        let b = &breaths[c];
        let phase = (t - b.start) / b.period;
        let noise: f64 = rng.sample(StandardNormal);
        let v = b.amp * b.factor * (2.0 * std::f64::consts::PI * phase).sin() + cfg.noise_std * noise;
        air.push(v as f32);
    }

    // SpO2
    let n_spo2 = (dur * SPO2_HZ).round() as usize;
    let mut spo2 = Vec::with_capacity(n_spo2);
    for k in 0..n_spo2 {
        let t = k as f64 / SPO2_HZ;
        let drop: f64 = desats
            .iter()
            .filter(|d| t > d.t0 && t < d.end())
            .map(|d| d.drop_at(t))
            .sum();
        let noise: f64 = rng.sample(StandardNormal);
        spo2.push((cfg.baseline_spo2_pct - drop + cfg.noise_std * noise).min(100.0) as f32);
    }

    // EEG: 1/f background, alpha bursts, fast-activity arousal bursts
    let n_eeg = (dur * EEG_HZ).round() as usize;
    let mut eeg: Vec<f64> = pink_noise(&mut rng, n_eeg).into_iter().map(|v| v * EEG_RMS).collect();
    let n_alpha = poisson(&mut rng, ALPHA_BURSTS_PER_MIN * cfg.duration_min);
    for _ in 0..n_alpha {
        let len = (rng.gen_range(1.0..3.0) * EEG_HZ) as usize;
        let start = rng.gen_range(0..n_eeg.saturating_sub(len).max(1));
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for i in 0..len.min(n_eeg - start) {
            let t = i as f64 / EEG_HZ;
            let env = taper(i, len, (0.3 * EEG_HZ) as usize);
            eeg[start + i] += ALPHA_AMP * env * (std::f64::consts::TAU * 10.0 * t + phase).sin();
        }
    }
    let fast_band = butterworth_bandpass(18.0, 40.0, EEG_HZ);
    arousals.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    for a in &arousals {
        let start = (a.onset * EEG_HZ).round() as usize;
        let len = (a.duration * EEG_HZ).round() as usize;
        let pad = EEG_HZ as usize;
        let white: Vec<f64> = (0..len + 2 * pad).map(|_| rng.sample(StandardNormal)).collect();
        let band = filtfilt(&fast_band, &white, pad);
        let burst = &band[pad..pad + len];
        let rms = (burst.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
        for (i, v) in burst.iter().enumerate() {
            if let Some(slot) = eeg.get_mut(start + i) {
                *slot += AROUSAL_RMS * taper(i, len, (0.2 * EEG_HZ) as usize) * v / rms;
            }
        }
    }
    let eeg: Vec<f32> = eeg
        .into_iter()
        .map(|v| {
            let noise: f64 = rng.sample(StandardNormal);
            (v + cfg.noise_std * EEG_RMS * noise) as f32
        })
        .collect();

    let mut rec = Recording::new(
        format!("synth-{}", cfg.seed),
        vec![
            SampleSeries::new(ChannelKind::Eeg, EEG_HZ, eeg)?,
            SampleSeries::new(ChannelKind::Airflow, AIRFLOW_HZ, air)?,
            SampleSeries::new(ChannelKind::Spo2, SPO2_HZ, spo2)?,
        ],
    )?;
    rec.total_sleep_time_min = Some(cfg.duration_min);
    rec.annotations = annotations;
    Ok(rec)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map_or(0, |d| d.sample(rng) as usize)
}

/// `n` recordings with ids `rec000`, `rec001`, …; per-recording seeds and
/// respiratory-rate multipliers are drawn from `cfg.seed`.
pub fn generate_dataset(cfg: &GeneratorConfig, n: usize) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_DA7A);
    (0..n)
        .map(|i| {
            let seed: u64 = rng.gen();
            let u = if cfg.rate_spread > 0.0 {
                rng.gen_range(-cfg.rate_spread..cfg.rate_spread)
            } else {
                0.0
            };
            let sub = GeneratorConfig {
                seed,
                event_rate_per_h: cfg.event_rate_per_h.scaled_respiratory(u.exp()),
                ..cfg.clone()
            };
            let mut rec = generate(&sub)?;
            rec.id = format!("rec{i:03}");
            Ok(rec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::EventRates;

    fn short(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            duration_min: 20.0,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rates_give_no_events() {
        let cfg = GeneratorConfig {
            event_rate_per_h: EventRates::ZERO,
            ..short(3)
        };
        let rec = generate(&cfg).unwrap();
        assert!(rec.annotations.is_empty());
        assert_eq!(rec.total_sleep_time_min, Some(20.0));
    }

    #[test]
    fn same_seed_same_recording() {
        assert_eq!(generate(&short(5)).unwrap(), generate(&short(5)).unwrap());
        assert_ne!(generate(&short(5)).unwrap(), generate(&short(6)).unwrap());
    }

    #[test]
    fn channel_lengths_match_rates() {
        let rec = generate(&short(1)).unwrap();
        assert_eq!(rec.channel(ChannelKind::Eeg).unwrap().len(), 240_000);
        assert_eq!(rec.channel(ChannelKind::Airflow).unwrap().len(), 30_000);
        assert_eq!(rec.channel(ChannelKind::Spo2).unwrap().len(), 1_200);
    }

    #[test]
    fn annotations_respect_scoring_floors() {
        for seed in 0..5 {
            let rec = generate(&short(seed)).unwrap();
            for e in &rec.annotations {
                let floor = match e.label {
                    EventLabel::Apnea | EventLabel::Hypopnea => 10.0,
                    EventLabel::Arousal | EventLabel::Desaturation => 3.0,
                };
                assert!(e.duration_s >= floor, "{e:?}");
                assert!(e.end_s() <= 1200.0);
            }
        }
    }

    #[test]
    fn desat_shape_crossings() {
        let d = Desat {
            t0: 10.0,
            hold_end: 30.0,
            depth: 5.0,
        };
        let (a, b) = d.scored();
        assert!((d.drop_at(a) - 3.0).abs() < 1e-12);
        assert!((d.drop_at(b) - 3.0).abs() < 1e-12);
        assert_eq!(d.drop_at(d.end()), 0.0);
    }

    #[test]
    fn dataset_ids_and_spread() {
        let cfg = GeneratorConfig {
            duration_min: 10.0,
            rate_spread: 1.0,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg, 3).unwrap();
        let ids: Vec<&str> = ds.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["rec000", "rec001", "rec002"]);
    }
}
