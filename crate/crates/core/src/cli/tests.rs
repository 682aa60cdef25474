use super::*;
use crate::domain::{ChannelKind, EventInterval, SampleSeries};

fn ids(n: usize) -> Vec<(String, Option<SeverityClass>)> {
    let classes = [SeverityClass::None, SeverityClass::Mild, SeverityClass::Moderate, SeverityClass::Severe];
    (0..n).map(|i| (format!("rec{i:03}"), Some(classes[i % 4]))).collect()
}

#[test]
fn split_of_twenty_is_fifteen_three_two() {
    let s = split_dataset(&ids(20), 3);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (15, 3, 2));
    let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 20);
}

#[test]
fn split_is_deterministic_and_seeded() {
    let items = ids(40);
    assert_eq!(split_dataset(&items, 9), split_dataset(&items, 9));
    let differ = (0..10).any(|s| split_dataset(&items, s) != split_dataset(&items, 9));
    assert!(differ);
}

#[test]
fn split_spreads_each_stratum() {
    let s = split_dataset(&ids(40), 1);
    // 40 → test 4, val 6; four equal strata give one test item each
    let class_of = |id: &String| id[3..].parse::<usize>().unwrap() % 4;
    let mut per = [0usize; 4];
    for id in &s.test {
        per[class_of(id)] += 1;
    }
    assert_eq!(per, [1, 1, 1, 1]);
}

#[test]
fn small_split_may_leave_test_empty() {
    let s = split_dataset(&ids(7), 0);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 1, 0));
}

#[test]
fn parallel_map_keeps_order_and_first_error() {
    let xs: Vec<usize> = (0..37).collect();
    let out = parallel_map(&xs, 4, |&x| Ok(x * 2)).unwrap();
    assert_eq!(out, xs.iter().map(|x| x * 2).collect::<Vec<_>>());
    let err = parallel_map(&xs, 3, |&x| {
        if x % 10 == 5 {
            Err(Error::InvalidArgument(format!("{x}")))
        } else {
            Ok(x)
        }
    })
    .unwrap_err();
    assert!(err.to_string().ends_with(": 5"));
}

#[test]
fn config_with_only_seed_fills_defaults() {
    let cfg = RunConfig::from_json(r#"{"seed": 42}"#).unwrap();
    let expected = RunConfig::default().with_seed(42);
    assert_eq!(cfg, expected);
    assert_eq!(cfg.generator.seed, 42);
    assert_eq!(cfg.train.seed, 42);
}

#[test]
fn unknown_config_key_is_rejected_with_position() {
    let err = RunConfig::from_json("{\n  \"seed\": 1,\n  \"sede\": 2\n}").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    assert!(msg.contains("line 3"), "{msg}");
    assert!(msg.contains("sede"), "{msg}");
    let nested = RunConfig::from_json(r#"{"train": {"lr": 1}}"#).unwrap_err();
    assert!(nested.to_string().contains("lr"));
}

#[test]
fn run_config_round_trips() {
    let cfg = RunConfig::default().with_seed(5);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
}

#[test]
fn signal_encoding_round_trips() {
    let s = SampleSeries::new(ChannelKind::Spo2, 10.0, vec![97.5, 96.0, f32::MIN_POSITIVE, -0.0]).unwrap();
    let bytes = io::encode_signal(&s);
    let back = io::decode_signal(&bytes).unwrap();
    assert_eq!(back.kind, s.kind);
    assert_eq!(back.rate_hz, s.rate_hz);
    assert_eq!(
        back.samples.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        s.samples.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert!(io::decode_signal(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(io::decode_signal(&bad), Err(Error::Format(_))));
}

#[test]
fn recording_round_trips_through_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = crate::synth::GeneratorConfig::default();
    cfg.duration_min = 10.0;
    let rec = crate::synth::generate(&cfg).unwrap();
    io::write_recording(dir.path(), &rec).unwrap();
    let back = io::read_recording(dir.path()).unwrap();
    assert_eq!(back.id, rec.id);
    assert_eq!(back.channels, rec.channels);
    assert_eq!(back.total_sleep_time_min, rec.total_sleep_time_min);
    assert_eq!(back.annotations.len(), rec.annotations.len());
    for (a, b) in back.annotations.iter().zip(&rec.annotations) {
        assert_eq!(a.label, b.label);
        assert!((a.onset_s() - b.onset_s()).abs() < 1e-9);
        assert!((a.end_s() - b.end_s()).abs() < 1e-9);
    }
}

#[test]
fn evaluate_rejects_mismatched_ids_and_empty_predictions() {
    let pred = tempfile::tempdir().unwrap();
    let truth = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let empty = cmd_evaluate(&cfg, pred.path(), truth.path(), Scenario::Events, out.path(), None).unwrap_err();
    assert!(empty.to_string().contains("no prediction"));
    let ev = vec![EventInterval::truth(10.0, 30.0, EventLabel::Apnea).unwrap()];
    io::write_json(&pred.path().join("a.json"), &AnnotationFile::new("a", Some(60.0), &ev)).unwrap();
    io::write_json(&truth.path().join("b.json"), &AnnotationFile::new("b", Some(60.0), &ev)).unwrap();
    let err = cmd_evaluate(&cfg, pred.path(), truth.path(), Scenario::Events, out.path(), None).unwrap_err();
    assert!(err.to_string().contains("only in predictions"), "{err}");
}

#[test]
fn evaluate_identical_sets_scores_perfectly() {
    let pred = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let ev = vec![
        EventInterval::truth(10.0, 30.0, EventLabel::Apnea).unwrap(),
        EventInterval::truth(100.0, 120.0, EventLabel::Hypopnea).unwrap(),
        EventInterval::truth(200.0, 205.0, EventLabel::Arousal).unwrap(),
        EventInterval::truth(300.0, 320.0, EventLabel::Desaturation).unwrap(),
    ];
    for (id, tst) in [("a", 60.0), ("b", 5.0), ("c", 20.0)] {
        io::write_json(&pred.path().join(format!("{id}.json")), &AnnotationFile::new(id, Some(tst), &ev)).unwrap();
    }
    let cfg = RunConfig::default();
    let r = cmd_evaluate(&cfg, pred.path(), pred.path(), Scenario::Events, out.path(), None).unwrap();
    assert_eq!(r.events.unwrap().macro_f1, 1.0);
    assert!(out.path().join("f1_curve.csv").exists());
    let r = cmd_evaluate(&cfg, pred.path(), pred.path(), Scenario::Severity, out.path(), None).unwrap();
    let c = r.classes.unwrap();
    assert_eq!(c.accuracy, 1.0);
    assert_eq!(c.regression.unwrap().r2, 1.0);
    let csv = std::fs::read_to_string(out.path().join("bland_altman.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let r = cmd_evaluate(&cfg, pred.path(), pred.path(), Scenario::Screening, out.path(), None).unwrap();
    assert_eq!(r.classes.unwrap().confusion.total(), 3);
}

#[test]
fn cli_parses_global_flags_after_subcommand() {
    let cli = Cli::try_parse_from(["osa", "generate", "--n", "3", "--seed", "4", "--out", "x", "--threads", "2"]).unwrap();
    assert_eq!(cli.seed, Some(4));
    assert_eq!(cli.threads, 2);
    assert!(matches!(cli.command, Command::Generate { n: 3 }));
    assert!(Cli::try_parse_from(["osa", "detect", "c", "d", "--part", "test"]).is_err());
    assert!(run_args(["osa", "generate"]).is_err());
}
