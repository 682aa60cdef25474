//! Synthetic polysomnography with exact annotations, and a rule-based
//! scorer that recovers those annotations from the raw signals.
//!
//! Event morphology follows the usual clinical sequence: airflow drops
//! first, SpO2 falls after a delay, and an EEG arousal (a burst of >16 Hz
//! activity) appears around breathing resumption.

mod generator;
mod oracle;

use serde::{Deserialize, Serialize};

pub use generator::{generate, generate_dataset};
pub use oracle::{oracle_score, oracle_score_with, OracleConfig, OracleReport};

use crate::domain::{EventInterval, EventLabel};
use crate::error::{Error, Result};

/// Native sampling rates of the synthetic channels.
pub const EEG_HZ: f64 = 200.0;
pub const AIRFLOW_HZ: f64 = 25.0;
pub const SPO2_HZ: f64 = 1.0;

/// Seconds after a respiratory event's end during which an arousal or
/// desaturation onset still counts as accompanying it.
pub const ASSOC_WINDOW_S: f64 = 30.0;

/// Events per hour of sleep, one entry per [`EventLabel`].
///
/// Apnea and hypopnea rates count respiratory events. Arousal and
/// desaturation rates count *spontaneous* events only; the ones coupled to
/// respiratory events come on top, controlled by the coupling probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EventRates {
    pub apnea: f64,
    pub hypopnea: f64,
    pub arousal: f64,
    pub desaturation: f64,
}

impl Default for EventRates {
    fn default() -> Self {
        Self {
            apnea: 8.0,
            hypopnea: 12.0,
            arousal: 4.0,
            desaturation: 4.0,
        }
    }
}

impl EventRates {
    pub const ZERO: Self = Self {
        apnea: 0.0,
        hypopnea: 0.0,
        arousal: 0.0,
        desaturation: 0.0,
    };

    pub fn get(&self, label: EventLabel) -> f64 {
        match label {
            EventLabel::Apnea => self.apnea,
            EventLabel::Hypopnea => self.hypopnea,
            EventLabel::Arousal => self.arousal,
            EventLabel::Desaturation => self.desaturation,
        }
    }

    pub fn scaled_respiratory(&self, factor: f64) -> Self {
        Self {
            apnea: self.apnea * factor,
            hypopnea: self.hypopnea * factor,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub duration_min: f64,
    pub seed: u64,
    pub event_rate_per_h: EventRates,
    /// Fractional airflow amplitude loss during apneas (≥ 0.9).
    pub apnea_drop_frac: f64,
    /// Fractional airflow amplitude loss during hypopneas, in [0.3, 0.9).
    pub hypopnea_drop_frac: f64,
    /// Minimum desaturation nadir depth in percentage points (≥ 3).
    pub desat_drop_pct: f64,
    /// Lag between respiratory onset and the start of the SpO2 fall.
    pub desat_delay_s: f64,
    /// Shortest arousal; generated arousals last at least one second more.
    pub arousal_min_s: f64,
    pub baseline_spo2_pct: f64,
    /// Additive white noise, relative to each channel's reference scale
    /// (breath amplitude, one SpO2 percentage point, background EEG RMS).
    pub noise_std: f64,
    /// Probability that an apnea is followed by a desaturation.
    pub apnea_desat_prob: f64,
    /// Probability that an apnea ends with an arousal.
    pub apnea_arousal_prob: f64,
    /// Probability that a hypopnea carries a desaturation; hypopneas without
    /// one always carry an arousal, so every hypopnea is scoreable.
    pub hypopnea_desat_prob: f64,
    /// Probability of an additional arousal on a desaturating hypopnea.
    pub hypopnea_arousal_prob: f64,
    /// `generate_dataset` scales respiratory rates per recording by
    /// `exp(u)`, `u ~ U(-rate_spread, rate_spread)`.
    pub rate_spread: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            duration_min: 60.0,
            seed: 0,
            event_rate_per_h: EventRates::default(),
            apnea_drop_frac: 0.95,
            hypopnea_drop_frac: 0.5,
            desat_drop_pct: 4.0,
            desat_delay_s: 10.0,
            arousal_min_s: 3.0,
            baseline_spo2_pct: 96.0,
            noise_std: 0.01,
            apnea_desat_prob: 0.85,
            apnea_arousal_prob: 0.5,
            hypopnea_desat_prob: 0.7,
            hypopnea_arousal_prob: 0.3,
            rate_spread: 0.0,
        }
    }
}

impl GeneratorConfig {
    /// Highest `noise_std` at which the closed-loop oracle test is expected
    /// to reproduce the annotations.
    pub const LOW_NOISE_MAX: f64 = 0.02;

    /// Event-rate preset named after a cohort: mean AHI and the
    /// apnea/hypopnea split of its scored events.
    pub fn cohort(name: &str) -> Result<Self> {
        let (ahi, apnea_frac) = match name.to_ascii_lowercase().as_str() {
            "mros" => (21.35, 68_485.0 / (68_485.0 + 118_447.0)),
            "shhs" => (17.94, 140_463.0 / (140_463.0 + 891_332.0)),
            "mesa" => (24.15, 43_062.0 / (43_062.0 + 187_612.0)),
            "cfs" => (12.53, 14_427.0 / (14_427.0 + 61_878.0)),
            "homepap" => (17.94, 3_274.0 / (3_274.0 + 14_083.0)),
            other => return Err(Error::Config(format!("unknown cohort preset {other:?}"))),
        };
        Ok(Self {
            event_rate_per_h: EventRates {
                apnea: ahi * apnea_frac,
                hypopnea: ahi * (1.0 - apnea_frac),
                ..EventRates::default()
            },
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.duration_min >= 10.0) {
            return bad(format!("duration_min must be at least 10, got {}", self.duration_min));
        }
        let r = &self.event_rate_per_h;
        for label in EventLabel::ALL {
            let v = r.get(label);
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{} rate must be nonnegative, got {v}", label.name()));
            }
        }
        if !(0.9..1.0).contains(&self.apnea_drop_frac) {
            return bad(format!("apnea_drop_frac must lie in [0.9, 1), got {}", self.apnea_drop_frac));
        }
        if !(0.3..0.9).contains(&self.hypopnea_drop_frac) {
            return bad(format!(
                "hypopnea_drop_frac must lie in [0.3, 0.9), got {}",
                self.hypopnea_drop_frac
            ));
        }
        if !(self.desat_drop_pct >= 3.0 && self.desat_drop_pct <= 20.0) {
            return bad(format!("desat_drop_pct must lie in [3, 20], got {}", self.desat_drop_pct));
        }
        if !(self.desat_delay_s > 0.0 && self.desat_delay_s <= 20.0) {
            return bad(format!("desat_delay_s must lie in (0, 20], got {}", self.desat_delay_s));
        }
        if !(self.arousal_min_s >= 3.0 && self.arousal_min_s <= 15.0) {
            return bad(format!("arousal_min_s must lie in [3, 15], got {}", self.arousal_min_s));
        }
        if !(self.baseline_spo2_pct > 80.0 && self.baseline_spo2_pct <= 100.0) {
            return bad(format!(
                "baseline_spo2_pct must lie in (80, 100], got {}",
                self.baseline_spo2_pct
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be nonnegative, got {}", self.noise_std));
        }
        for (name, p) in [
            ("apnea_desat_prob", self.apnea_desat_prob),
            ("apnea_arousal_prob", self.apnea_arousal_prob),
            ("hypopnea_desat_prob", self.hypopnea_desat_prob),
            ("hypopnea_arousal_prob", self.hypopnea_arousal_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.rate_spread >= 0.0 && self.rate_spread <= 3.0) {
            return bad(format!("rate_spread must lie in [0, 3], got {}", self.rate_spread));
        }
        Ok(())
    }
}

/// Apneas, plus hypopneas that have an arousal or desaturation with onset in
/// `[hypopnea onset, hypopnea end + assoc_window_s]`.
///
/// Applied to EEG-only predictions this gives the arousal-supported AHI
/// estimate; output keeps input order.
pub fn estimated_ahi_events(events: &[EventInterval], assoc_window_s: f64) -> Vec<EventInterval> {
    let markers: Vec<f64> = events
        .iter()
        .filter(|e| matches!(e.label, EventLabel::Arousal | EventLabel::Desaturation))
        .map(EventInterval::onset_s)
        .collect();
    events
        .iter()
        .filter(|e| match e.label {
            EventLabel::Apnea => true,
            EventLabel::Hypopnea => {
                let (on, end) = e.onset_end();
                markers.iter().any(|&m| m >= on && m <= end + assoc_window_s)
            }
            _ => false,
        })
        .copied()
        .collect()
}
