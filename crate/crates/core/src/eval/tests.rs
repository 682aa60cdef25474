use super::*;
use proptest::prelude::*;

fn ev(on: f64, end: f64, label: EventLabel) -> EventInterval {
    EventInterval::truth(on, end, label).unwrap()
}

fn repeat(n: usize, label: EventLabel) -> Vec<EventInterval> {
    (0..n).map(|i| ev(i as f64 * 60.0, i as f64 * 60.0 + 15.0, label)).collect()
}

#[test]
fn identical_sets_are_perfect() {
    let truth = vec![
        ev(0.0, 12.0, EventLabel::Apnea),
        ev(30.0, 45.0, EventLabel::Hypopnea),
        ev(50.0, 55.0, EventLabel::Arousal),
    ];
    for thr in [0.1, 0.5, 1.0] {
        let m = match_events(&truth, &truth, thr);
        assert_eq!(m.macro_f1(), 1.0);
        for l in [EventLabel::Apnea, EventLabel::Hypopnea, EventLabel::Arousal] {
            assert_eq!(m.counts(l).precision(), 1.0);
            assert_eq!(m.counts(l).recall(), 1.0);
        }
    }
}

#[test]
fn one_prediction_cannot_match_two_truths() {
    let truth = vec![ev(0.0, 10.0, EventLabel::Apnea), ev(10.0, 20.0, EventLabel::Apnea)];
    let pred = vec![ev(0.0, 20.0, EventLabel::Apnea)];
    let c = match_events(&pred, &truth, 0.2).counts(EventLabel::Apnea);
    assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 1));
}

#[test]
fn greedy_choice_is_repaired_by_augmentation() {
    // greedy takes the 0.4 pair first and strands the second prediction
    let pred = vec![ev(4.0, 15.0, EventLabel::Apnea), ev(0.0, 3.0, EventLabel::Apnea)];
    let truth = vec![ev(0.0, 10.0, EventLabel::Apnea), ev(11.0, 15.0, EventLabel::Apnea)];
    let m = match_events(&pred, &truth, 0.2);
    assert_eq!(m.counts(EventLabel::Apnea).tp, 2);
    let mut got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.pred, p.truth)).collect();
    got.sort();
    assert_eq!(got, vec![(0, 1), (1, 0)]);
    assert!((m.pairs[0].iou - 4.0 / 11.0).abs() < 1e-12);
}

#[test]
fn greedy_result_kept_when_already_maximum() {
    let truth = vec![ev(0.0, 10.0, EventLabel::Apnea)];
    let pred = vec![ev(1.0, 10.0, EventLabel::Apnea), ev(0.0, 8.0, EventLabel::Apnea)];
    let m = match_events(&pred, &truth, 0.2);
    assert_eq!(m.pairs.len(), 1);
    assert_eq!(m.pairs[0].pred, 0);
}

#[test]
fn curve_conventions() {
    let truth = repeat(3, EventLabel::Apnea);
    let rec = vec![(truth.clone(), truth.clone())];
    let flat = f1_curve(&rec, &DEFAULT_IOU_THRESHOLDS);
    assert!(flat.per_label.iter().all(|r| r[0] == 1.0));
    let empty = f1_curve(&[(vec![], truth)], &DEFAULT_IOU_THRESHOLDS);
    assert!(empty.per_label.iter().all(|r| r[0] == 0.0));
    assert!(empty.macro_f1.iter().all(|&m| m == 0.0));
    assert!(flat.to_csv().starts_with("iou,apnea,hypopnea,arousal,desaturation,macro\n0.10,"));
}

#[test]
fn ahi_examples() {
    let mut events = repeat(20, EventLabel::Apnea);
    events.extend(repeat(10, EventLabel::Hypopnea));
    assert!((compute_ahi(&events, 360.0).unwrap() - 5.0).abs() < 1e-12);
    assert_eq!(compute_ahi(&[], 360.0).unwrap(), 0.0);
    let mut twelve = repeat(7, EventLabel::Apnea);
    twelve.extend(repeat(5, EventLabel::Hypopnea));
    twelve.extend(repeat(4, EventLabel::Arousal));
    assert!((compute_ahi(&twelve, 390.0).unwrap() - 12.0 / 6.5).abs() < 1e-12);
    assert!(matches!(compute_ahi(&twelve, 0.0), Err(Error::UndefinedAhi)));
}

#[test]
fn ahi_is_time_weighted_additive() {
    let a = repeat(7, EventLabel::Apnea);
    let b = repeat(3, EventLabel::Hypopnea);
    let (ta, tb) = (300.0, 420.0);
    let joint: Vec<_> = a.iter().chain(&b).copied().collect();
    let combined = compute_ahi(&joint, ta + tb).unwrap();
    let weighted = (compute_ahi(&a, ta).unwrap() * ta + compute_ahi(&b, tb).unwrap() * tb) / (ta + tb);
    assert!((combined - weighted).abs() < 1e-12);
}

#[test]
fn severity_and_screen_boundaries() {
    use SeverityClass::*;
    let cases = [(0.0, None), (4.99, None), (5.0, Mild), (14.99, Mild), (15.0, Moderate), (29.99, Moderate), (30.0, Severe)];
    for (ahi, class) in cases {
        assert_eq!(severity(ahi).unwrap(), class, "{ahi}");
    }
    for b in [5.0, 15.0, 30.0] {
        let eps = 1e-9;
        assert_eq!(severity(b).unwrap().index(), severity(b - eps).unwrap().index() + 1);
    }
    assert!(severity(-1.0).is_err());
    assert_eq!(screen(14.99).unwrap(), Screen::Below);
    assert_eq!(screen(15.0).unwrap(), Screen::ModerateOrSevere);
    assert_eq!(screen(0.0).unwrap(), Screen::Below);
    assert!(screen(f64::NAN).is_err());
}

#[test]
fn eeg_only_estimate() {
    let mut events = repeat(3, EventLabel::Apnea);
    events.push(ev(500.0, 515.0, EventLabel::Hypopnea));
    assert!((estimated_ahi_eeg_only(&events, 60.0, 30.0).unwrap() - 3.0).abs() < 1e-12);
    events.push(ev(520.0, 525.0, EventLabel::Arousal));
    let full = compute_ahi(&events, 60.0).unwrap();
    assert!((estimated_ahi_eeg_only(&events, 60.0, 30.0).unwrap() - full).abs() < 1e-12);
}

#[test]
fn confusion_matrix_cases() {
    let names = ["a", "b", "c"];
    let perfect = confusion_matrix(&[0, 1, 2, 1], &[0, 1, 2, 1], &names).unwrap();
    assert_eq!(perfect.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    assert_eq!(perfect.accuracy(), 1.0);
    assert_eq!(perfect.macro_f1(), 1.0);

    let constant = confusion_matrix(&[1; 4], &[0, 1, 2, 2], &names).unwrap();
    assert!(constant.counts.iter().all(|r| r[0] == 0 && r[2] == 0));

    // six samples tallied by hand
    let m = confusion_matrix(&[0, 0, 1, 2, 2, 1], &[0, 1, 1, 2, 0, 1], &names).unwrap();
    assert_eq!(m.counts, vec![vec![1, 0, 1], vec![1, 2, 0], vec![0, 0, 1]]);
    assert!((m.percent[1][1] - 200.0 / 3.0).abs() < 1e-9);
    for row in &m.percent {
        assert!((row.iter().sum::<f64>() - 100.0).abs() < 0.01);
    }
    assert!((m.accuracy() - 4.0 / 6.0).abs() < 1e-12);
    // accuracy equals micro-averaged recall
    let recall_micro = (0..3).map(|c| m.counts[c][c]).sum::<usize>() as f64 / 6.0;
    assert_eq!(m.accuracy(), recall_micro);
}

#[test]
fn regression_examples() {
    let truth = [2.0, 8.0, 17.0, 33.0, 12.0];
    let s = regression_stats(&truth, &truth).unwrap();
    assert_eq!((s.r2, s.bias, s.loa_low, s.loa_high), (1.0, 0.0, 0.0, 0.0));
    let shifted: Vec<f64> = truth.iter().map(|t| t + 2.0).collect();
    let s = regression_stats(&shifted, &truth).unwrap();
    assert!((s.bias - 2.0).abs() < 1e-12);
    let mean = truth.iter().sum::<f64>() / 5.0;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    assert!((s.r2 - (1.0 - 5.0 * 4.0 / ss_tot)).abs() < 1e-12);
    assert!(matches!(regression_stats(&[1.0; 3], &[4.0; 3]), Err(Error::UndefinedR2)));
    assert!(regression_stats(&[1.0, 2.0], &[1.0, 2.0]).is_err());
}

/// Exhaustive maximum-cardinality assignment over pairs with IoU ≥ threshold.
fn brute_force_tp(pred: &[EventInterval], truth: &[EventInterval], thr: f64) -> usize {
    fn go(i: usize, pred: &[EventInterval], truth: &[EventInterval], used: &mut Vec<bool>, thr: f64) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, truth, used, thr);
        for j in 0..truth.len() {
            let iou = interval_iou(&pred[i], &truth[j]);
            if !used[j] && pred[i].label == truth[j].label && iou > 0.0 && iou >= thr {
                used[j] = true;
                best = best.max(1 + go(i + 1, pred, truth, used, thr));
                used[j] = false;
            }
        }
        best
    }
    go(0, pred, truth, &mut vec![false; truth.len()], thr)
}

fn arb_set(max: usize) -> impl Strategy<Value = Vec<EventInterval>> {
    prop::collection::vec((0.0f64..120.0, 3.0f64..30.0), 0..=max)
        .prop_map(|v| v.into_iter().map(|(on, d)| ev(on, on + d, EventLabel::Apnea)).collect())
}

proptest! {
    #[test]
    fn matching_equals_brute_force(pred in arb_set(6), truth in arb_set(6), thr in 0.05f64..0.9) {
        let got = match_events(&pred, &truth, thr).counts(EventLabel::Apnea).tp;
        prop_assert_eq!(got, brute_force_tp(&pred, &truth, thr));
    }

    #[test]
    fn f1_nonincreasing_in_iou(pred in arb_set(8), truth in arb_set(8)) {
        let curve = f1_curve(&[(pred, truth)], &DEFAULT_IOU_THRESHOLDS);
        prop_assert!(is_nonincreasing(&curve));
    }

    #[test]
    fn match_counts_are_consistent(pred in arb_set(8), truth in arb_set(8), thr in 0.05f64..1.0) {
        let m = match_events(&pred, &truth, thr);
        let c = m.counts(EventLabel::Apnea);
        prop_assert_eq!(c.tp + c.fn_, truth.len());
        prop_assert_eq!(c.tp + c.fp, pred.len());
    }
}
