//! Domain types shared by every stage: signals, events, masks and the
//! interval algebra used for matching.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signal modality. The discriminant is the fixed mask / input-row index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Eeg = 0,
    Airflow = 1,
    Spo2 = 2,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 3] = [ChannelKind::Eeg, ChannelKind::Airflow, ChannelKind::Spo2];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::Eeg => "eeg",
            ChannelKind::Airflow => "airflow",
            ChannelKind::Spo2 => "spo2",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "eeg" => Ok(ChannelKind::Eeg),
            "airflow" | "flow" => Ok(ChannelKind::Airflow),
            "spo2" => Ok(ChannelKind::Spo2),
            other => Err(Error::InvalidArgument(format!("unknown channel kind '{other}'"))),
        }
    }
}

/// One uniformly sampled channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSeries {
    pub kind: ChannelKind,
    pub rate_hz: f64,
    pub samples: Vec<f32>,
}

impl SampleSeries {
    pub fn new(kind: ChannelKind, rate_hz: f64, samples: Vec<f32>) -> Result<Self> {
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{kind}: sampling rate must be positive, got {rate_hz}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!("{kind}: empty sample series")));
        }
        Ok(Self {
            kind,
            rate_hz,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }
}

/// A multichannel recording with its scored events.
///
/// Event times are measured from the start of the recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub channels: Vec<SampleSeries>,
    /// Total sleep time in minutes; `None` when the study did not provide it.
    pub total_sleep_time_min: Option<f64>,
    pub annotations: Vec<EventInterval>,
}

impl Recording {
    pub fn new(id: impl Into<String>, channels: Vec<SampleSeries>) -> Result<Self> {
        let mut seen = [false; ChannelKind::COUNT];
        for ch in &channels {
            if std::mem::replace(&mut seen[ch.kind.index()], true) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate {} channel",
                    ch.kind
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            channels,
            total_sleep_time_min: None,
            annotations: Vec::new(),
        })
    }

    pub fn channel(&self, kind: ChannelKind) -> Option<&SampleSeries> {
        self.channels.iter().find(|c| c.kind == kind)
    }

    pub fn channel_mut(&mut self, kind: ChannelKind) -> Option<&mut SampleSeries> {
        self.channels.iter_mut().find(|c| c.kind == kind)
    }

    pub fn has(&self, kind: ChannelKind) -> bool {
        self.channel(kind).is_some()
    }

    /// Longest channel duration in seconds.
    pub fn duration_s(&self) -> f64 {
        self.channels
            .iter()
            .map(SampleSeries::duration_s)
            .fold(0.0, f64::max)
    }

    /// Mask with one flag per channel actually present.
    pub fn available(&self) -> ModalityMask {
        let mut flags = [false; ChannelKind::COUNT];
        for ch in &self.channels {
            flags[ch.kind.index()] = true;
        }
        ModalityMask { flags }
    }
}

/// Event classes, in output-column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventLabel {
    Apnea = 0,
    Hypopnea = 1,
    Arousal = 2,
    Desaturation = 3,
}

impl EventLabel {
    pub const ALL: [EventLabel; 4] = [
        EventLabel::Apnea,
        EventLabel::Hypopnea,
        EventLabel::Arousal,
        EventLabel::Desaturation,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EventLabel::Apnea => "apnea",
            EventLabel::Hypopnea => "hypopnea",
            EventLabel::Arousal => "arousal",
            EventLabel::Desaturation => "desaturation",
        }
    }

    pub fn is_respiratory(self) -> bool {
        matches!(self, EventLabel::Apnea | EventLabel::Hypopnea)
    }
}

impl fmt::Display for EventLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "apnea" => Ok(EventLabel::Apnea),
            "hypopnea" => Ok(EventLabel::Hypopnea),
            "arousal" => Ok(EventLabel::Arousal),
            "desaturation" | "desat" => Ok(EventLabel::Desaturation),
            other => Err(Error::InvalidArgument(format!("unknown event label '{other}'"))),
        }
    }
}

/// A scored event: center time, duration and label.
///
/// Ground-truth annotations carry `score = 1.0`, so annotations and model
/// predictions share this type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventInterval {
    pub center_s: f64,
    pub duration_s: f64,
    pub label: EventLabel,
    pub score: f64,
}

impl EventInterval {
    pub fn new(center_s: f64, duration_s: f64, label: EventLabel, score: f64) -> Result<Self> {
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "event duration must be positive, got {duration_s}"
            )));
        }
        if !center_s.is_finite() || center_s - duration_s / 2.0 < -1e-9 {
            return Err(Error::InvalidArgument(format!(
                "event onset must be nonnegative (center {center_s}, duration {duration_s})"
            )));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!(
                "event score must lie in [0, 1], got {score}"
            )));
        }
        Ok(Self {
            center_s,
            duration_s,
            label,
            score,
        })
    }

    pub fn from_onset(onset_s: f64, duration_s: f64, label: EventLabel, score: f64) -> Result<Self> {
        Self::new(onset_s + duration_s / 2.0, duration_s, label, score)
    }

    /// Ground-truth event from its onset/end.
    pub fn truth(onset_s: f64, end_s: f64, label: EventLabel) -> Result<Self> {
        Self::from_onset(onset_s, end_s - onset_s, label, 1.0)
    }

    pub fn onset_s(&self) -> f64 {
        self.center_s - self.duration_s / 2.0
    }

    pub fn end_s(&self) -> f64 {
        self.center_s + self.duration_s / 2.0
    }

    pub fn onset_end(&self) -> (f64, f64) {
        onset_end(self)
    }

    /// Same event shifted in time.
    pub fn shifted(&self, by_s: f64) -> Self {
        Self {
            center_s: self.center_s + by_s,
            ..*self
        }
    }

    /// The part of the event inside `[start, end)`, if any.
    pub fn clipped(&self, start_s: f64, end_s: f64) -> Option<Self> {
        let on = self.onset_s().max(start_s);
        let off = self.end_s().min(end_s);
        (off > on).then(|| Self {
            center_s: (on + off) / 2.0,
            duration_s: off - on,
            ..*self
        })
    }
}

/// `(onset, end)` in seconds.
pub fn onset_end(e: &EventInterval) -> (f64, f64) {
    (e.onset_s(), e.end_s())
}

/// Temporal intersection-over-union; labels are ignored.
pub fn interval_iou(a: &EventInterval, b: &EventInterval) -> f64 {
    let (a0, a1) = a.onset_end();
    let (b0, b1) = b.onset_end();
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.duration_s + b.duration_s - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Per-channel availability flags indexed by [`ChannelKind`].
/// Serialized as its name (`"all"`, `"eeg"`, `"airflow+spo2"`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    pub flags: [bool; ChannelKind::COUNT],
}

impl ModalityMask {
    pub const fn all() -> Self {
        Self { flags: [true; 3] }
    }

    pub const fn eeg_only() -> Self {
        Self {
            flags: [true, false, false],
        }
    }

    pub const fn airflow_spo2() -> Self {
        Self {
            flags: [false, true, true],
        }
    }

    pub fn from_kinds(kinds: &[ChannelKind]) -> Self {
        let mut flags = [false; ChannelKind::COUNT];
        for k in kinds {
            flags[k.index()] = true;
        }
        Self { flags }
    }

    pub fn is_set(&self, kind: ChannelKind) -> bool {
        self.flags[kind.index()]
    }

    pub fn any(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn kinds(&self) -> impl Iterator<Item = ChannelKind> + '_ {
        ChannelKind::ALL.into_iter().filter(|k| self.is_set(*k))
    }

    /// Error unless at least one modality is enabled.
    pub fn validate(&self) -> Result<()> {
        if self.any() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "modality mask must enable at least one channel".into(),
            ))
        }
    }

    /// Canonical name, e.g. `"eeg"`, `"airflow+spo2"`, `"all"`.
    pub fn name(&self) -> String {
        if self.flags == [true; 3] {
            return "all".into();
        }
        self.kinds().map(ChannelKind::name).collect::<Vec<_>>().join("+")
    }
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::all()
    }
}

impl Serialize for ModalityMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for ModalityMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for ModalityMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "all" {
            return Ok(Self::all());
        }
        let kinds = s
            .split('+')
            .map(str::parse)
            .collect::<Result<Vec<ChannelKind>>>()?;
        let mask = Self::from_kinds(&kinds);
        mask.validate()?;
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(on: f64, off: f64) -> EventInterval {
        EventInterval::truth(on, off, EventLabel::Apnea).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert!((interval_iou(&ev(0.0, 10.0), &ev(5.0, 15.0)) - 5.0 / 15.0).abs() < 1e-12);
        assert_eq!(interval_iou(&ev(3.0, 9.0), &ev(3.0, 9.0)), 1.0);
        assert_eq!(interval_iou(&ev(0.0, 10.0), &ev(20.0, 30.0)), 0.0);
        // touching intervals share no time
        assert_eq!(interval_iou(&ev(0.0, 10.0), &ev(10.0, 30.0)), 0.0);
    }

    #[test]
    fn iou_ignores_labels() {
        let a = ev(0.0, 10.0);
        let mut b = ev(0.0, 10.0);
        b.label = EventLabel::Arousal;
        assert_eq!(interval_iou(&a, &b), 1.0);
    }

    #[test]
    fn onset_end_examples() {
        let e = |c, d| EventInterval::new(c, d, EventLabel::Apnea, 1.0).unwrap();
        assert_eq!(e(15.0, 10.0).onset_end(), (10.0, 20.0));
        assert_eq!(e(5.0, 10.0).onset_end(), (0.0, 10.0));
        assert_eq!(e(100.0, 3.0).onset_end(), (98.5, 101.5));
    }

    #[test]
    fn rejects_invalid_events() {
        assert!(EventInterval::new(5.0, 0.0, EventLabel::Apnea, 1.0).is_err());
        assert!(EventInterval::new(1.0, 10.0, EventLabel::Apnea, 1.0).is_err());
        assert!(EventInterval::new(10.0, 1.0, EventLabel::Apnea, 1.5).is_err());
    }

    #[test]
    fn mask_names() {
        assert_eq!("eeg".parse::<ModalityMask>().unwrap(), ModalityMask::eeg_only());
        assert_eq!(
            "airflow+spo2".parse::<ModalityMask>().unwrap(),
            ModalityMask::airflow_spo2()
        );
        assert_eq!("all".parse::<ModalityMask>().unwrap(), ModalityMask::all());
        assert_eq!(ModalityMask::airflow_spo2().name(), "airflow+spo2");
        assert!("".parse::<ModalityMask>().is_err());
        assert!(ModalityMask { flags: [false; 3] }.validate().is_err());
    }

    #[test]
    fn duplicate_channels_rejected() {
        let s = SampleSeries::new(ChannelKind::Eeg, 100.0, vec![0.0; 4]).unwrap();
        assert!(Recording::new("r", vec![s.clone(), s]).is_err());
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_bounded_and_translation_invariant(
            a0 in 0.0f64..100.0, ad in 0.1f64..50.0,
            b0 in 0.0f64..100.0, bd in 0.1f64..50.0,
            shift in 0.0f64..1000.0,
        ) {
            let a = ev(a0, a0 + ad);
            let b = ev(b0, b0 + bd);
            let ab = interval_iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - interval_iou(&b, &a)).abs() < 1e-12);
            let shifted = interval_iou(&a.shifted(shift), &b.shifted(shift));
            prop_assert!((ab - shifted).abs() < 1e-9);
            if (a0 - b0).abs() > 1e-6 || (ad - bd).abs() > 1e-6 {
                prop_assert!(ab < 1.0);
            }
        }

        #[test]
        fn onset_end_inverts_constructor(on in 0.0f64..1e4, d in 1e-3f64..500.0) {
            let e = EventInterval::from_onset(on, d, EventLabel::Hypopnea, 1.0).unwrap();
            let (o, end) = e.onset_end();
            prop_assert!((o - on).abs() < 1e-9);
            prop_assert!((end - o - d).abs() < 1e-9);
            let back = EventInterval::from_onset(o, end - o, e.label, e.score).unwrap();
            prop_assert!((back.center_s - e.center_s).abs() < 1e-9);
        }
    }
}
