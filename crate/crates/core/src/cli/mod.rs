//! The `osa` command line: generate, train, detect, evaluate, oracle.

pub mod config;
pub mod io;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{EventLabel, ModalityMask, Recording};
use crate::dsp::{quality_check, Quality, EPOCH_S};
use crate::error::{Error, Result};
use crate::eval::{
    compute_ahi, confusion_matrix, f1_curve, pooled_match, regression_stats, screen, severity, ConfusionMatrix,
    Counts, F1Curve, RegressionStats, Screen, SeverityClass,
};
use crate::events::detect_recording;
use crate::net::Net;
use crate::synth::{generate_dataset, oracle_score_with};
use crate::tensor::Checkpoint;
use crate::train::{prepare_epochs, train_loop, DefaultWindows, EpochLog, TrainState};

pub use config::{EvalConfig, RunConfig};
use io::{AnnotationFile, Manifest, ManifestEntry};

pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Parser)]
#[command(name = "osa", version, about = "Sleep-apnea event detection on multichannel recordings")]
pub struct Cli {
    /// Run configuration (JSON); missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (output file for `oracle`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Modalities fed to the network: all, eeg, airflow+spo2, ...
    #[arg(long, global = true, default_value = "all")]
    pub mask: String,
    /// Worker threads for per-recording work.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Events,
    Severity,
    Screening,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Train on a dataset directory.
    Train {
        dataset: PathBuf,
        /// Training state written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Detect events in a recording or dataset directory.
    Detect {
        checkpoint: PathBuf,
        input: PathBuf,
        /// Split file restricting a dataset input.
        #[arg(long, requires = "part")]
        split: Option<PathBuf>,
        #[arg(long, value_enum, requires = "split")]
        part: Option<Part>,
    },
    /// Compare predicted with reference annotations.
    Evaluate {
        pred: PathBuf,
        truth: PathBuf,
        #[arg(long, value_enum, default_value = "events")]
        scenario: Scenario,
        /// Split file restricting a dataset reference.
        #[arg(long, requires = "part")]
        split: Option<PathBuf>,
        #[arg(long, value_enum, requires = "split")]
        part: Option<Part>,
    },
    /// Score a recording with the rule-based scorer.
    Oracle { recording: PathBuf },
}

/// Entry point of the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    let threads = cli.threads.max(1);
    match &cli.command {
        Command::Generate { n } => cmd_generate(&cfg, require_out(cli)?, *n),
        Command::Train { dataset, resume } => cmd_train(&cfg, dataset, require_out(cli)?, resume.as_deref()),
        Command::Detect {
            checkpoint,
            input,
            split,
            part,
        } => {
            let mask: ModalityMask = cli.mask.parse()?;
            let subset = load_subset(split.as_deref(), *part)?;
            cmd_detect(&cfg, checkpoint, input, mask, require_out(cli)?, subset.as_deref(), threads)
        }
        Command::Evaluate {
            pred,
            truth,
            scenario,
            split,
            part,
        } => {
            let subset = load_subset(split.as_deref(), *part)?;
            cmd_evaluate(&cfg, pred, truth, *scenario, require_out(cli)?, subset.as_deref()).map(|_| ())
        }
        Command::Oracle { recording } => cmd_oracle(&cfg, recording, require_out(cli)?),
    }
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("this command needs --out".into()))
}

fn load_subset(split: Option<&Path>, part: Option<Part>) -> Result<Option<Vec<String>>> {
    match (split, part) {
        (Some(path), Some(part)) => {
            let s: Split = io::read_json(path)?;
            Ok(Some(match part {
                Part::Train => s.train,
                Part::Val => s.val,
                Part::Test => s.test,
            }))
        }
        _ => Ok(None),
    }
}

/// Applies `f` to every item on up to `threads` workers; results keep the
/// input order, and the first error by index wins.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let workers = threads.min(items.len());
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("--n must be positive".into()));
    }
    let recs = generate_dataset(&cfg.generator, n)?;
    let mut entries = Vec::with_capacity(n);
    for rec in &recs {
        io::write_recording(&out.join(&rec.id), rec)?;
        entries.push(ManifestEntry {
            id: rec.id.clone(),
            path: rec.id.clone(),
        });
    }
    io::write_json(
        &out.join(io::MANIFEST_FILE),
        &Manifest {
            seed: cfg.generator.seed,
            count: n,
            recordings: entries,
        },
    )?;
    log::info!("wrote {n} recordings to {}", out.display());
    Ok(())
}

/// Recording ids of each part; `rejected` failed the quality screen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    #[serde(default)]
    pub rejected: Vec<String>,
}

/// 75/15/10 split: validation and test sizes are floored, the remainder
/// trains. Recordings are spread evenly over the parts within each
/// severity stratum (`None` forms its own stratum); order inside a stratum
/// is a seeded shuffle.
pub fn split_dataset(items: &[(String, Option<SeverityClass>)], seed: u64) -> Split {
    let n = items.len();
    let n_val = n * 15 / 100;
    let n_test = n / 10;
    let mut strata: BTreeMap<Option<SeverityClass>, Vec<&String>> = BTreeMap::new();
    for (id, class) in items {
        strata.entry(*class).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5B11_7000);
    let mut keyed: Vec<(f64, usize, &String)> = Vec::with_capacity(n);
    for (s, (_, ids)) in strata.iter_mut().enumerate() {
        ids.sort();
        ids.shuffle(&mut rng);
        let m = ids.len() as f64;
        for (rank, id) in ids.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / m, s, id));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut split = Split::default();
    for (i, (_, _, id)) in keyed.into_iter().enumerate() {
        let part = if i < n_test {
            &mut split.test
        } else if i < n_test + n_val {
            &mut split.val
        } else {
            &mut split.train
        };
        part.push(id.clone());
    }
    split.train.sort();
    split.val.sort();
    split.test.sort();
    split
}

/// Total sleep time, falling back to the recording length.
pub fn sleep_time_min(rec: &Recording) -> f64 {
    rec.total_sleep_time_min.unwrap_or_else(|| rec.duration_s() / 60.0)
}

fn true_severity(rec: &Recording) -> Option<SeverityClass> {
    if rec.total_sleep_time_min.is_none() && rec.annotations.is_empty() {
        return None;
    }
    compute_ahi(&rec.annotations, sleep_time_min(rec)).and_then(severity).ok()
}

fn load_dataset(dir: &Path, subset: Option<&[String]>) -> Result<Vec<Recording>> {
    let mut recs = Vec::new();
    for (id, path) in io::dataset_entries(dir)? {
        if subset.is_none_or(|s| s.contains(&id)) {
            recs.push(io::read_recording(&path)?);
        }
    }
    Ok(recs)
}

pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let all = load_dataset(dataset, None)?;
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for rec in all {
        match quality_check(&rec, &cfg.preprocessing) {
            Quality::Accept => kept.push(rec),
            Quality::Reject(why) => {
                log::warn!("excluding {}: {why}", rec.id);
                rejected.push(rec.id.clone());
            }
        }
    }
    let items: Vec<(String, Option<SeverityClass>)> = kept.iter().map(|r| (r.id.clone(), true_severity(r))).collect();
    let mut split = split_dataset(&items, cfg.seed);
    split.rejected = rejected;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Config(format!(
            "{} usable recordings give an empty training or validation split",
            kept.len()
        )));
    }
    io::write_json(&out.join(SPLIT_FILE), &split)?;
    io::write_json(&out.join("config.json"), cfg)?;
    let pick = |ids: &[String]| -> Vec<Recording> { kept.iter().filter(|r| ids.contains(&r.id)).cloned().collect() };
    let windows = DefaultWindows::standard();
    let (train, missed) = prepare_epochs(&pick(&split.train), cfg.train.stride_s, &windows, &cfg.net)?;
    let (val, _) = prepare_epochs(&pick(&split.val), EPOCH_S, &windows, &cfg.net)?;
    if !missed.is_empty() {
        log::warn!("{} training events have no default window", missed.len());
    }

    let state = match resume {
        Some(p) => {
            let st = TrainState::from_checkpoint(&Checkpoint::load(p)?)?;
            if st.net.cfg != cfg.net {
                log::warn!("resuming with the checkpoint's network configuration");
            }
            st
        }
        None => TrainState::new(cfg.net.clone(), cfg.seed)?,
    };
    let log_path = out.join(LOG_FILE);
    let append = resume.is_some() && log_path.exists();
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if !append {
        writeln!(log_file, "{}", EpochLog::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut best_so_far = state.best_val_loss;
    train_loop(&train, &val, state, &cfg.train, &cfg.decode, |row, st| {
        writeln!(log_file, "{}", row.csv_line()).map_err(|e| Error::io(&log_path, e))?;
        log_file.flush().map_err(|e| Error::io(&log_path, e))?;
        st.to_checkpoint()?.save(&out.join(STATE_FILE))?;
        if st.best_val_loss < best_so_far {
            best_so_far = st.best_val_loss;
            st.net.to_checkpoint()?.save(&out.join(MODEL_FILE))?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Reads a network checkpoint or a training state.
pub fn load_net(path: &Path) -> Result<Net> {
    let ckpt = Checkpoint::load(path)?;
    match Net::from_checkpoint(&ckpt) {
        Ok(net) => Ok(net),
        Err(first) => TrainState::from_checkpoint(&ckpt).map(|s| s.net).map_err(|_| first),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub recording_id: String,
    pub mask: ModalityMask,
    pub total_sleep_time_min: f64,
    pub ahi: f64,
    pub severity: SeverityClass,
    pub screen: Screen,
    pub event_counts: BTreeMap<EventLabel, usize>,
}

pub fn cmd_detect(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    mask: ModalityMask,
    out: &Path,
    subset: Option<&[String]>,
    threads: usize,
) -> Result<()> {
    let net = load_net(checkpoint)?;
    let inputs: Vec<PathBuf> = if io::is_dataset(input) {
        io::dataset_entries(input)?
            .into_iter()
            .filter(|(id, _)| subset.is_none_or(|s| s.contains(id)))
            .map(|(_, p)| p)
            .collect()
    } else {
        vec![input.to_path_buf()]
    };
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(format!("no recordings selected in {}", input.display())));
    }
    parallel_map(&inputs, threads, |path| {
        let rec = io::read_recording(path)?;
        let mut net = net.clone();
        let events = detect_recording(&mut net, &rec, mask, &cfg.decode, cfg.train.batch)?;
        let tst = sleep_time_min(&rec);
        let ahi = compute_ahi(&events, tst)?;
        let report = DetectionReport {
            recording_id: rec.id.clone(),
            mask,
            total_sleep_time_min: tst,
            ahi,
            severity: severity(ahi)?,
            screen: screen(ahi)?,
            event_counts: EventLabel::ALL
                .iter()
                .map(|&l| (l, events.iter().filter(|e| e.label == l).count()))
                .collect(),
        };
        io::write_json(&out.join(format!("{}.json", rec.id)), &AnnotationFile::new(&rec.id, Some(tst), &events))?;
        io::write_json(&out.join(format!("{}.report.json", rec.id)), &report)?;
        log::info!("{}: AHI {ahi:.2} ({})", rec.id, report.severity);
        Ok(())
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMetrics {
    pub report_iou: f64,
    pub macro_f1: f64,
    pub counts: BTreeMap<EventLabel, Counts>,
    pub curve: F1Curve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Present for the severity scenario when at least three recordings
    /// with varying reference AHI are available.
    pub regression: Option<RegressionStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scenario: Scenario,
    pub recordings: Vec<String>,
    pub events: Option<EventMetrics>,
    pub classes: Option<ClassMetrics>,
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    pred_dir: &Path,
    truth_dir: &Path,
    scenario: Scenario,
    out: &Path,
    subset: Option<&[String]>,
) -> Result<EvaluationReport> {
    let preds = io::read_annotation_sets(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::InvalidArgument(format!("no prediction files in {}", pred_dir.display())));
    }
    let mut truths = io::read_annotation_sets(truth_dir)?;
    if let Some(s) = subset {
        truths.retain(|t| s.contains(&t.recording_id));
    }
    let pred_ids: Vec<&String> = preds.iter().map(|p| &p.recording_id).collect();
    let truth_ids: Vec<&String> = truths.iter().map(|t| &t.recording_id).collect();
    if pred_ids != truth_ids {
        let only_pred: Vec<_> = pred_ids.iter().filter(|i| !truth_ids.contains(i)).collect();
        let only_truth: Vec<_> = truth_ids.iter().filter(|i| !pred_ids.contains(i)).collect();
        return Err(Error::InvalidArgument(format!(
            "recording ids differ: only in predictions {only_pred:?}, only in reference {only_truth:?}"
        )));
    }
    let pairs: Vec<_> = preds
        .iter()
        .zip(&truths)
        .map(|(p, t)| Ok((p.intervals()?, t.intervals()?)))
        .collect::<Result<_>>()?;
    let mut report = EvaluationReport {
        scenario,
        recordings: preds.iter().map(|p| p.recording_id.clone()).collect(),
        events: None,
        classes: None,
    };
    match scenario {
        Scenario::Events => {
            let curve = f1_curve(&pairs, &cfg.eval.iou_thresholds);
            let pooled = pooled_match(&pairs, cfg.eval.report_iou);
            io::write_bytes(&out.join("f1_curve.csv"), curve.to_csv().as_bytes())?;
            report.events = Some(EventMetrics {
                report_iou: cfg.eval.report_iou,
                macro_f1: pooled.macro_f1(),
                counts: EventLabel::ALL.iter().map(|&l| (l, pooled.counts(l))).collect(),
                curve,
            });
        }
        Scenario::Severity | Scenario::Screening => {
            let tst = |a: &AnnotationFile, other: &AnnotationFile| {
                a.total_sleep_time_min.or(other.total_sleep_time_min).ok_or_else(|| {
                    Error::InvalidArgument(format!("{}: total sleep time unknown", a.recording_id))
                })
            };
            let mut pred_ahi = Vec::new();
            let mut true_ahi = Vec::new();
            for ((p, t), (pe, te)) in preds.iter().zip(&truths).zip(&pairs) {
                pred_ahi.push(compute_ahi(pe, tst(p, t)?)?);
                true_ahi.push(compute_ahi(te, tst(t, p)?)?);
            }
            let (classes, pi, ti): (Vec<&str>, Vec<usize>, Vec<usize>) = if scenario == Scenario::Severity {
                (
                    SeverityClass::ALL.iter().map(|c| c.name()).collect(),
                    pred_ahi.iter().map(|&a| severity(a).map(SeverityClass::index)).collect::<Result<_>>()?,
                    true_ahi.iter().map(|&a| severity(a).map(SeverityClass::index)).collect::<Result<_>>()?,
                )
            } else {
                (
                    vec![Screen::Below.name(), Screen::ModerateOrSevere.name()],
                    pred_ahi.iter().map(|&a| screen(a).map(Screen::index)).collect::<Result<_>>()?,
                    true_ahi.iter().map(|&a| screen(a).map(Screen::index)).collect::<Result<_>>()?,
                )
            };
            let confusion = confusion_matrix(&pi, &ti, &classes)?;
            let regression = if scenario == Scenario::Severity {
                let mut csv = String::from("recording_id,true_ahi,pred_ahi,mean,difference\n");
                for ((id, p), t) in report.recordings.iter().zip(&pred_ahi).zip(&true_ahi) {
                    csv.push_str(&format!("{id},{t:.6},{p:.6},{:.6},{:.6}\n", (p + t) / 2.0, p - t));
                }
                io::write_bytes(&out.join("bland_altman.csv"), csv.as_bytes())?;
                match regression_stats(&pred_ahi, &true_ahi) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        log::warn!("no regression statistics: {e}");
                        None
                    }
                }
            } else {
                None
            };
            report.classes = Some(ClassMetrics {
                accuracy: confusion.accuracy(),
                macro_f1: confusion.macro_f1(),
                confusion,
                regression,
            });
        }
    }
    let name = match scenario {
        Scenario::Events => "events",
        Scenario::Severity => "severity",
        Scenario::Screening => "screening",
    };
    io::write_json(&out.join(format!("{name}.json")), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub recording_id: String,
    pub skipped: Vec<String>,
    pub event_counts: BTreeMap<EventLabel, usize>,
}

/// Writes the scorer's annotations to `out` and a summary, including the
/// rules skipped for missing channels, next to it as `*.report.json`.
pub fn cmd_oracle(cfg: &RunConfig, recording: &Path, out: &Path) -> Result<()> {
    let rec = io::read_recording(recording)?;
    let report = oracle_score_with(&rec, &cfg.oracle);
    for s in &report.skipped {
        log::warn!("{}: {s}", rec.id);
    }
    io::write_json(out, &AnnotationFile::new(&rec.id, Some(sleep_time_min(&rec)), &report.events))?;
    let summary = OracleSummary {
        recording_id: rec.id.clone(),
        skipped: report.skipped.clone(),
        event_counts: EventLabel::ALL
            .iter()
            .map(|&l| (l, report.events.iter().filter(|e| e.label == l).count()))
            .collect(),
    };
    io::write_json(&out.with_extension("report.json"), &summary)
}

#[cfg(test)]
mod tests;
