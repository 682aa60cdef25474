use crate::domain::{ChannelKind, EventInterval, EventLabel, Recording};
use crate::dsp::{butterworth_bandpass, filtfilt};

use super::ASSOC_WINDOW_S;

/// Thresholds of the rule-based scorer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub baseline_window_s: f64,
    /// Fractional peak-amplitude drop that marks a reduced breath.
    pub resp_drop_frac: f64,
    /// Median drop of a reduced-breath run at or above which it is an apnea.
    pub apnea_drop_frac: f64,
    pub resp_min_s: f64,
    pub assoc_window_s: f64,
    pub desat_drop_pct: f64,
    pub desat_min_s: f64,
    /// Fast-band power fraction, relative to its running baseline.
    pub arousal_ratio: f64,
    pub arousal_min_s: f64,
    /// Arousal-free time required before a new arousal.
    pub arousal_stable_s: f64,
    pub fast_band_hz: (f64, f64),
    pub total_band_hz: (f64, f64),
    /// Zero crossings closer than this are merged into one breath.
    pub min_breath_s: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            baseline_window_s: 60.0,
            resp_drop_frac: 0.3,
            apnea_drop_frac: 0.9,
            resp_min_s: 10.0,
            assoc_window_s: ASSOC_WINDOW_S,
            desat_drop_pct: 3.0,
            desat_min_s: 3.0,
            arousal_ratio: 3.0,
            arousal_min_s: 3.0,
            arousal_stable_s: 10.0,
            fast_band_hz: (16.0, 45.0),
            total_band_hz: (0.5, 45.0),
            min_breath_s: 1.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleReport {
    /// Scored events ordered by onset.
    pub events: Vec<EventInterval>,
    /// Rules that could not run, with the reason.
    pub skipped: Vec<String>,
}

/// Scores apneas, hypopneas, desaturations and arousals from raw signals
/// (airflow in arbitrary units, SpO2 in percent, EEG in µV).
pub fn oracle_score(rec: &Recording) -> OracleReport {
    oracle_score_with(rec, &OracleConfig::default())
}

pub fn oracle_score_with(rec: &Recording, cfg: &OracleConfig) -> OracleReport {
    let mut report = OracleReport::default();
    let desats = match rec.channel(ChannelKind::Spo2) {
        Some(s) => score_desaturations(&to_f64(&s.samples), s.rate_hz, cfg),
        None => {
            report.skipped.push("desaturation: missing channel spo2".into());
            Vec::new()
        }
    };
    let arousals = match rec.channel(ChannelKind::Eeg) {
        Some(s) => score_arousals(&to_f64(&s.samples), s.rate_hz, cfg),
        None => {
            report.skipped.push("arousal: missing channel eeg".into());
            Vec::new()
        }
    };
    let resp = match rec.channel(ChannelKind::Airflow) {
        Some(s) => score_breathing(&to_f64(&s.samples), s.rate_hz, cfg),
        None => {
            report.skipped.push("apnea/hypopnea: missing channel airflow".into());
            Vec::new()
        }
    };
    let markers: Vec<f64> = desats.iter().chain(&arousals).map(|&(on, _)| on).collect();
    for (on, end, median_drop) in resp {
        let label = if median_drop >= cfg.apnea_drop_frac {
            EventLabel::Apnea
        } else if markers.iter().any(|&m| m >= on && m <= end + cfg.assoc_window_s) {
            EventLabel::Hypopnea
        } else {
            continue;
        };
        push(&mut report.events, on, end, label);
    }
    for (on, end) in desats {
        push(&mut report.events, on, end, EventLabel::Desaturation);
    }
    for (on, end) in arousals {
        push(&mut report.events, on, end, EventLabel::Arousal);
    }
    report.events.sort_by(|a, b| {
        a.onset_s()
            .total_cmp(&b.onset_s())
            .then(a.label.index().cmp(&b.label.index()))
    });
    report
}

fn push(out: &mut Vec<EventInterval>, on: f64, end: f64, label: EventLabel) {
    if let Ok(e) = EventInterval::truth(on.max(0.0), end, label) {
        out.push(e);
    }
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Centered moving average over `width` samples.
fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    let half = width / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + width - half).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Runs of reduced breaths lasting at least `resp_min_s`:
/// `(onset, end, median drop)`.
fn score_breathing(flow: &[f64], rate: f64, cfg: &OracleConfig) -> Vec<(f64, f64, f64)> {
    let smooth = moving_average(flow, ((0.5 * rate).round() as usize).max(1));
    let mut crossings: Vec<f64> = Vec::new();
    for k in 1..smooth.len() {
        let (a, b) = (smooth[k - 1], smooth[k]);
        if a < 0.0 && b >= 0.0 {
            let t = (k as f64 - 1.0 + a / (a - b)) / rate;
            if crossings.last().is_none_or(|&p| t - p >= cfg.min_breath_s) {
                crossings.push(t);
            }
        }
    }
    // (start, end, half peak-to-peak amplitude)
    let cycles: Vec<(f64, f64, f64)> = crossings
        .windows(2)
        .map(|w| {
            let lo = (w[0] * rate).ceil() as usize;
            let hi = ((w[1] * rate).ceil() as usize).min(smooth.len());
            let seg = &smooth[lo..hi.max(lo + 1).min(smooth.len())];
            let max = seg.iter().copied().fold(f64::MIN, f64::max);
            let min = seg.iter().copied().fold(f64::MAX, f64::min);
            (w[0], w[1], 0.5 * (max - min))
        })
        .collect();
    if cycles.is_empty() {
        return Vec::new();
    }
    let mut all: Vec<f64> = cycles.iter().map(|c| c.2).collect();
    let mut baseline = median(&mut all).unwrap_or(0.0);

    let mut drops = Vec::with_capacity(cycles.len());
    let mut flagged = vec![false; cycles.len()];
    for (i, &(start, _, amp)) in cycles.iter().enumerate() {
        let mut window: Vec<f64> = (0..i)
            .rev()
            .take_while(|&j| cycles[j].0 >= start - cfg.baseline_window_s)
            .filter(|&j| !flagged[j])
            .map(|j| cycles[j].2)
            .collect();
        if let Some(m) = median(&mut window) {
            baseline = m;
        }
        let drop = if baseline > 0.0 { 1.0 - amp / baseline } else { 0.0 };
        flagged[i] = drop >= cfg.resp_drop_frac;
        drops.push(drop);
    }

    let mut out = Vec::new();
    let mut i = 0;
    while i < cycles.len() {
        if !flagged[i] {
            i += 1;
            continue;
        }
        let first = i;
        while i < cycles.len() && flagged[i] {
            i += 1;
        }
        let (on, end) = (cycles[first].0, cycles[i - 1].1);
        if end - on >= cfg.resp_min_s {
            let mut d = drops[first..i].to_vec();
            out.push((on, end, median(&mut d).unwrap_or(0.0)));
        }
    }
    out
}

/// Spans where SpO2 sits at least `desat_drop_pct` below the median of the
/// preceding unflagged samples; crossing times are interpolated.
fn score_desaturations(spo2: &[f64], rate: f64, cfg: &OracleConfig) -> Vec<(f64, f64)> {
    let window = (cfg.baseline_window_s * rate).round() as usize;
    let mut flagged = vec![false; spo2.len()];
    let mut drops = vec![0.0; spo2.len()];
    let mut baseline = spo2.first().copied().unwrap_or(0.0);
    let mut out = Vec::new();
    let mut run_start: Option<f64> = None;
    let threshold = cfg.desat_drop_pct;
    for k in 0..spo2.len() {
        if run_start.is_none() {
            let mut prior: Vec<f64> = (k.saturating_sub(window)..k)
                .filter(|&j| !flagged[j])
                .map(|j| spo2[j])
                .collect();
            if let Some(m) = median(&mut prior) {
                baseline = m;
            }
            // the previous sample is re-expressed against the current baseline
            // so that the interpolated crossing uses one reference
            if k > 0 {
                drops[k - 1] = baseline - spo2[k - 1];
            }
        }
        drops[k] = baseline - spo2[k];
        flagged[k] = drops[k] >= threshold;
        let cross = |k: usize| -> f64 {
            let (a, b) = (drops[k - 1], drops[k]);
            let frac = if (b - a).abs() > 0.0 { (threshold - a) / (b - a) } else { 1.0 };
            (k as f64 - 1.0 + frac.clamp(0.0, 1.0)) / rate
        };
        match (run_start, flagged[k]) {
            (None, true) => run_start = Some(if k == 0 { 0.0 } else { cross(k) }),
            (Some(on), false) => {
                let end = cross(k);
                if end - on >= cfg.desat_min_s {
                    out.push((on, end));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    out
}

/// Spans where the fast-band share of EEG power exceeds `arousal_ratio`
/// times its running median, after `arousal_stable_s` of quiet.
fn score_arousals(eeg: &[f64], rate: f64, cfg: &OracleConfig) -> Vec<(f64, f64)> {
    if eeg.len() < (2.0 * rate) as usize {
        return Vec::new();
    }
    let nyq_guard = 0.49 * rate;
    let pad = eeg.len().min((5.0 * rate) as usize);
    let fast = filtfilt(
        &butterworth_bandpass(cfg.fast_band_hz.0, cfg.fast_band_hz.1.min(nyq_guard), rate),
        eeg,
        pad,
    );
    let total = filtfilt(
        &butterworth_bandpass(cfg.total_band_hz.0, cfg.total_band_hz.1.min(nyq_guard), rate),
        eeg,
        pad,
    );
    let prefix = |x: &[f64]| -> Vec<f64> {
        let mut p = Vec::with_capacity(x.len() + 1);
        p.push(0.0);
        for v in x {
            p.push(p.last().unwrap() + v * v);
        }
        p
    };
    let (pf, pt) = (prefix(&fast), prefix(&total));
    let step = ((0.1 * rate).round() as usize).max(1);
    let half = (0.5 * rate).round() as usize;
    let dt = step as f64 / rate;
    let ratios: Vec<f64> = (0..eeg.len() / step)
        .map(|k| {
            let c = k * step;
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(eeg.len());
            let t = pt[hi] - pt[lo];
            if t > 0.0 {
                (pf[hi] - pf[lo]) / t
            } else {
                0.0
            }
        })
        .collect();

    let window = (cfg.baseline_window_s / dt).round() as usize;
    let refresh = ((1.0 / dt).round() as usize).max(1);
    let mut flagged = vec![false; ratios.len()];
    let mut all = ratios.clone();
    let mut baseline = median(&mut all).unwrap_or(0.0);
    for k in 0..ratios.len() {
        if k % refresh == 0 && k > 0 {
            let mut prior: Vec<f64> = (k.saturating_sub(window)..k)
                .filter(|&j| !flagged[j])
                .map(|j| ratios[j])
                .collect();
            if prior.len() * 2 >= window.min(k) {
                if let Some(m) = median(&mut prior) {
                    baseline = m;
                }
            }
        }
        flagged[k] = ratios[k] > cfg.arousal_ratio * baseline;
    }

    // runs, with sub-second gaps closed
    let mut runs: Vec<(f64, f64)> = Vec::new();
    let mut k = 0;
    while k < ratios.len() {
        if !flagged[k] {
            k += 1;
            continue;
        }
        let first = k;
        while k < ratios.len() && flagged[k] {
            k += 1;
        }
        let on = (first as f64 - 0.5) * dt;
        let end = (k as f64 - 0.5) * dt;
        match runs.last_mut() {
            Some(last) if on - last.1 < 1.0 => last.1 = end,
            _ => runs.push((on.max(0.0), end)),
        }
    }
    let mut out = Vec::new();
    let mut quiet_since = 0.0;
    for (on, end) in runs {
        if end - on >= cfg.arousal_min_s && on - quiet_since >= cfg.arousal_stable_s {
            out.push((on, end));
        }
        quiet_since = end;
    }
    out
}
