//! On-disk formats: binary signal files, JSON annotations and manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{ChannelKind, EventInterval, EventLabel, Recording, SampleSeries};
use crate::error::{Error, Result};

/// `OSASIG` + two NULs, then format version and four reserved bytes.
pub const SIGNAL_MAGIC: &[u8; 8] = b"OSASIG\0\0";
pub const SIGNAL_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const BODY_HEADER_LEN: usize = 1 + 8 + 8;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn signal_file_name(kind: ChannelKind) -> String {
    format!("{}.sig", kind.name())
}

pub fn encode_signal(series: &SampleSeries) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + BODY_HEADER_LEN + 4 * series.samples.len());
    out.extend_from_slice(SIGNAL_MAGIC);
    out.extend_from_slice(&SIGNAL_VERSION.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.push(series.kind.index() as u8);
    out.extend_from_slice(&series.rate_hz.to_le_bytes());
    out.extend_from_slice(&(series.samples.len() as u64).to_le_bytes());
    for v in &series.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_signal(bytes: &[u8]) -> Result<SampleSeries> {
    if bytes.len() < HEADER_LEN + BODY_HEADER_LEN || &bytes[..8] != SIGNAL_MAGIC {
        return Err(Error::Format("not a signal file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != SIGNAL_VERSION {
        return Err(Error::Format(format!("unsupported signal file version {version}")));
    }
    let body = &bytes[HEADER_LEN..];
    let kind = ChannelKind::from_index(body[0] as usize)
        .ok_or_else(|| Error::Format(format!("unknown channel kind {}", body[0])))?;
    let rate = f64::from_le_bytes(body[1..9].try_into().unwrap());
    let count = u64::from_le_bytes(body[9..17].try_into().unwrap()) as usize;
    let data = &body[BODY_HEADER_LEN..];
    if data.len() != count * 4 {
        return Err(Error::Format(format!(
            "signal file declares {count} samples but holds {} bytes",
            data.len()
        )));
    }
    let samples = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SampleSeries::new(kind, rate, samples)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

/// Parses JSON, naming the file, line and column on failure.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Format(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEvent {
    pub label: EventLabel,
    pub onset_s: f64,
    pub duration_s: f64,
    pub score: f64,
}

/// Events of one recording, as stored in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub recording_id: String,
    pub total_sleep_time_min: Option<f64>,
    pub events: Vec<AnnotationEvent>,
}

impl AnnotationFile {
    pub fn new(recording_id: &str, total_sleep_time_min: Option<f64>, events: &[EventInterval]) -> Self {
        Self {
            recording_id: recording_id.to_string(),
            total_sleep_time_min,
            events: events
                .iter()
                .map(|e| AnnotationEvent {
                    label: e.label,
                    onset_s: e.onset_s(),
                    duration_s: e.duration_s,
                    score: e.score,
                })
                .collect(),
        }
    }

    pub fn intervals(&self) -> Result<Vec<EventInterval>> {
        self.events
            .iter()
            .map(|e| EventInterval::from_onset(e.onset_s, e.duration_s, e.label, e.score))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Directory relative to the manifest.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub recordings: Vec<ManifestEntry>,
}

/// Writes signals and annotations of `rec` into `dir`.
pub fn write_recording(dir: &Path, rec: &Recording) -> Result<()> {
    for ch in &rec.channels {
        write_bytes(&dir.join(signal_file_name(ch.kind)), &encode_signal(ch))?;
    }
    write_json(
        &dir.join(ANNOTATION_FILE),
        &AnnotationFile::new(&rec.id, rec.total_sleep_time_min, &rec.annotations),
    )
}

/// Reads every signal file present in `dir` plus its annotations, if any.
pub fn read_recording(dir: &Path) -> Result<Recording> {
    let mut channels = Vec::new();
    for kind in ChannelKind::ALL {
        let p = dir.join(signal_file_name(kind));
        if p.exists() {
            let s = decode_signal(&read_bytes(&p)?).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
                other => other,
            })?;
            if s.kind != kind {
                return Err(Error::Format(format!("{} holds a {} channel", p.display(), s.kind)));
            }
            channels.push(s);
        }
    }
    if channels.is_empty() {
        return Err(Error::Format(format!("no signal files in {}", dir.display())));
    }
    let ann_path = dir.join(ANNOTATION_FILE);
    let fallback_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rec = Recording::new(fallback_id, channels)?;
    if ann_path.exists() {
        let ann: AnnotationFile = read_json(&ann_path)?;
        rec.id = ann.recording_id.clone();
        rec.total_sleep_time_min = ann.total_sleep_time_min;
        rec.annotations = ann.intervals()?;
    }
    Ok(rec)
}

pub fn is_dataset(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file()
}

/// Recording directories listed in a dataset manifest, in manifest order.
pub fn dataset_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let m: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    Ok(m.recordings.into_iter().map(|e| (e.id, dir.join(e.path))).collect())
}

/// Annotation sets keyed by recording id, sorted by id. A dataset directory
/// contributes each recording's annotation file; any other directory
/// contributes its `*.json` files except `*.report.json`.
pub fn read_annotation_sets(dir: &Path) -> Result<Vec<AnnotationFile>> {
    let mut files = Vec::new();
    if is_dataset(dir) {
        for (id, path) in dataset_entries(dir)? {
            let ann: AnnotationFile = read_json(&path.join(ANNOTATION_FILE))?;
            if ann.recording_id != id {
                return Err(Error::Format(format!(
                    "{}: recording id {} differs from manifest id {id}",
                    path.display(),
                    ann.recording_id
                )));
            }
            files.push(ann);
        }
    } else {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                name.ends_with(".json") && !name.ends_with(".report.json")
            })
            .collect();
        paths.sort();
        for p in paths {
            files.push(read_json(&p)?);
        }
    }
    files.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));
    for w in files.windows(2) {
        if w[0].recording_id == w[1].recording_id {
            return Err(Error::Format(format!(
                "recording id {} appears twice in {}",
                w[0].recording_id,
                dir.display()
            )));
        }
    }
    Ok(files)
}
