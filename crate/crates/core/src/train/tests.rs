use super::*;
use crate::domain::EventLabel::*;
use crate::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BIN_S: f64 = 0.08;
const T_OUT: usize = 3125;

fn ev(on: f64, end: f64, label: EventLabel) -> EventInterval {
    EventInterval::truth(on, end, label).unwrap()
}

fn column(t: &Tensor<f32>, k: usize) -> Vec<f32> {
    t.data().chunks(4).map(|r| r[k]).collect()
}

#[test]
fn defaults_match_the_documented_values() {
    let c = TrainConfig::default();
    assert_eq!((c.lr0, c.lr_min, c.beta1, c.beta2), (1e-4, 1e-6, 0.9, 0.999));
    assert_eq!((c.batch, c.epochs), (8, 50));
    assert_eq!((c.weight_decay, c.clip_norm, c.lambda_smooth, c.modality_dropout_p), (1e-5, 5.0, 0.1, 0.3));
    c.validate().unwrap();
    assert!(TrainConfig { lr0: 0.0, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { modality_dropout_p: 1.0, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { class_weights: Some([1.0, 0.0, 1.0, 1.0]), ..c }.validate().is_err());
}

#[test]
fn windows_tile_the_epoch() {
    let w = DefaultWindows::standard();
    for d in DefaultWindows::DURATIONS_S {
        let of_d: Vec<_> = w.windows.iter().filter(|(a, b)| ((b - a) - d).abs() < 1e-9).collect();
        assert_eq!(of_d[0].0, 0.0);
        assert!((of_d.last().unwrap().1 - EPOCH_S).abs() < 1e-9);
        assert!(of_d.iter().all(|(a, b)| *a >= 0.0 && *b <= EPOCH_S + 1e-9));
    }
}

proptest! {
    #[test]
    fn every_scoreable_event_has_a_window(on in 0.0f64..247.0, dur in 3.0f64..250.0, k in 0usize..4) {
        let end = (on + dur).min(EPOCH_S);
        prop_assume!(end - on >= 3.0);
        let w = DefaultWindows::standard();
        let (_, iou) = w.best_match(&ev(on, end, EventLabel::from_index(k).unwrap())).unwrap();
        prop_assert!(iou >= MATCH_IOU, "iou {iou}");
    }

    #[test]
    fn targets_ignore_event_order(seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events: Vec<EventInterval> = (0..6)
            .map(|_| {
                let on = rng.gen_range(0.0..230.0);
                ev(on, on + rng.gen_range(3.0..20.0), EventLabel::from_index(rng.gen_range(0..4)).unwrap())
            })
            .collect();
        let w = DefaultWindows::standard();
        let (a, _) = build_targets(&events, &w, T_OUT, BIN_S);
        events.shuffle(&mut rng);
        let (b, _) = build_targets(&events, &w, T_OUT, BIN_S);
        prop_assert_eq!(a.data(), b.data());
        let doubled: Vec<_> = events.iter().chain(events.iter()).copied().collect();
        let (c, _) = build_targets(&doubled, &w, T_OUT, BIN_S);
        prop_assert_eq!(a.data(), c.data());
    }

    #[test]
    fn clipping_is_a_projection(v in proptest::collection::vec(-10.0f32..10.0, 1..40), max in 0.1f64..20.0) {
        let mut once = vec![v];
        clip_gradients(&mut once, max);
        let mut twice = once.clone();
        let n = clip_gradients(&mut twice, max);
        prop_assert!(n <= max * (1.0 + 1e-6));
        for (a, b) in once[0].iter().zip(&twice[0]) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }
}

#[test]
fn no_events_give_zero_targets() {
    let (t, fails) = build_targets(&[], &DefaultWindows::standard(), T_OUT, BIN_S);
    assert_eq!(t.shape(), &[T_OUT, 4]);
    assert!(t.data().iter().all(|&v| v == 0.0));
    assert!(fails.is_empty());
}

#[test]
fn centered_apnea_paints_its_best_window() {
    let w = DefaultWindows::standard();
    let e = ev(115.0, 135.0, Apnea);
    // exhaustive scan, first maximum wins
    let mut best = (0, -1.0);
    for (i, &(a, b)) in w.windows.iter().enumerate() {
        let inter = (b.min(135.0) - a.max(115.0)).max(0.0);
        let iou = inter / ((b - a) + 20.0 - inter);
        if iou > best.1 {
            best = (i, iou);
        }
    }
    let (on, end) = w.windows[best.0];
    let (t, _) = build_targets(&[e], &w, T_OUT, BIN_S);
    let col = column(&t, 0);
    let painted: Vec<usize> = (0..T_OUT).filter(|&i| col[i] == 1.0).collect();
    assert!(!painted.is_empty());
    assert_eq!(painted.len(), painted.last().unwrap() - painted[0] + 1, "contiguous");
    for (i, &v) in col.iter().enumerate() {
        let c = (i as f64 + 0.5) * BIN_S;
        assert_eq!(v == 1.0, c >= on && c < end, "bin {i}");
    }
    for k in 1..4 {
        assert!(column(&t, k).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn overlapping_labels_paint_both_columns() {
    let (t, _) = build_targets(
        &[ev(100.0, 120.0, Hypopnea), ev(118.0, 124.0, Arousal)],
        &DefaultWindows::standard(),
        T_OUT,
        BIN_S,
    );
    assert!(column(&t, 1).iter().any(|&v| v == 1.0));
    assert!(column(&t, 2).iter().any(|&v| v == 1.0));
    let both = t.data().chunks(4).filter(|r| r[1] == 1.0 && r[2] == 1.0).count();
    assert!(both > 0);
}

#[test]
fn uncovered_event_is_reported() {
    let w = DefaultWindows::new(&[60.0], EPOCH_S);
    let e = ev(10.0, 12.0, Arousal);
    let (t, fails) = build_targets(&[e], &w, T_OUT, BIN_S);
    assert_eq!(fails, vec![e]);
    assert!(t.data().iter().all(|&v| v == 0.0));
}

fn naive_bce(z: f64, y: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[test]
fn bce_examples() {
    let one = |z: f64, y: f64| {
        bce_with_logits(&Tensor::<f64>::full(&[1, 1, 4], z), &Tensor::full(&[1, 1, 4], y), &[1.0; 4]).unwrap()
    };
    assert!((one(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
    let big = one(40.0, 1.0);
    assert!(big.is_finite() && big >= 0.0 && big < 1e-15);
    assert!(one(-800.0, 0.0).is_finite());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    use rand::Rng;
    let z = Tensor::<f64>::from_fn(&[2, 7, 4], |_| rng.gen_range(-8.0..8.0));
    let y = Tensor::<f64>::from_fn(&[2, 7, 4], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    let w = [0.5, 1.5, 1.0, 1.0];
    let reference: f64 = z
        .data()
        .iter()
        .zip(y.data())
        .enumerate()
        .map(|(i, (&z, &y))| w[i % 4] * naive_bce(z, y))
        .sum::<f64>()
        / 56.0;
    assert!((bce_with_logits(&z, &y, &w).unwrap() - reference).abs() < 1e-6);
    assert!(bce_with_logits(&z, &Tensor::zeros(&[2, 7, 3]), &w).is_err());
}

#[test]
fn smoothness_examples() {
    assert_eq!(smoothness(&Tensor::<f64>::full(&[2, 9, 4], 0.3)).unwrap(), 0.0);
    let mut step = Tensor::<f64>::zeros(&[1, 2, 4]);
    step.data_mut()[4] = 1.0;
    assert!((smoothness(&step).unwrap() - 0.25).abs() < 1e-15);
    assert!(matches!(smoothness(&Tensor::<f64>::zeros(&[1, 1, 4])), Err(Error::InvalidArgument(_))));

    // exhaustive over length-8 binary sequences in one channel
    let mut best = (0u32, -1.0);
    for bits in 0u32..256 {
        let mut t = Tensor::<f64>::zeros(&[1, 8, 1]);
        for i in 0..8 {
            t.data_mut()[i] = ((bits >> i) & 1) as f64;
        }
        let s = smoothness(&t).unwrap();
        if s > best.1 {
            best = (bits, s);
        }
    }
    assert!(best.0 == 0b0101_0101 || best.0 == 0b1010_1010);
    assert_eq!(best.1, 1.0);
}

#[test]
fn total_loss_is_bce_plus_weighted_smoothness() {
    let z = Tensor::<f64>::new(vec![1, 3, 4], vec![0.0, 1.0, -1.0, 2.0, 0.5, 0.5, 0.0, -2.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    let y = Tensor::<f64>::new(vec![1, 3, 4], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let w = [1.0, 2.0, 1.0, 0.5];
    let bce: f64 = (0..12).map(|i| w[i % 4] * naive_bce(z.data()[i], y.data()[i])).sum::<f64>() / 12.0;
    let s = |v: f64| 1.0 / (1.0 + (-v).exp());
    let smooth: f64 = (0..8).map(|i| (s(z.data()[i + 4]) - s(z.data()[i])).abs()).sum::<f64>() / 8.0;
    let total = total_loss(&z, &y, &w, 0.1).unwrap();
    assert!((total - (bce + 0.1 * smooth)).abs() < 1e-12);
    assert_eq!(total_loss(&z, &y, &w, 0.0).unwrap(), bce_with_logits(&z, &y, &w).unwrap());
    assert!(total >= bce);
}

#[test]
fn total_loss_gradient_matches_differences() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = Tensor::<f64>::from_fn(&[2, 5, 4], |_| rng.gen_range(-3.0..3.0));
    let y = Tensor::<f64>::from_fn(&[2, 5, 4], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
    let w = [1.0, 0.7, 1.3, 1.0];
    let mut tape = Tape::<f64>::new(0);
    let v = tape.leaf(z.clone());
    let l = total_loss_on_tape(&mut tape, v, &y, &w, 0.1).unwrap();
    let g = tape.backward(l).unwrap().get(v).unwrap().to_vec();
    let eps = 1e-6;
    let mut num = vec![0.0; g.len()];
    for i in 0..g.len() {
        let mut zp = z.clone();
        zp.data_mut()[i] += eps;
        let mut zm = z.clone();
        zm.data_mut()[i] -= eps;
        num[i] = (total_loss(&zp, &y, &w, 0.1).unwrap() - total_loss(&zm, &y, &w, 0.1).unwrap()) / (2.0 * eps);
    }
    let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / scale <= 1e-3, "rel {}", diff / scale);
}

fn one_param(v: f32) -> ParamStore {
    let mut p = ParamStore::new();
    p.add("w", Tensor::full(&[1], v)).unwrap();
    p
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut p = one_param(0.37);
    let mut s = AdamState::new(&p);
    for _ in 0..5 {
        adam_step(&mut p, &[vec![0.0]], &mut s, &cfg, 1e-3);
    }
    assert_eq!(p.get(p.find("w").unwrap()).data()[0], 0.37);
}

#[test]
fn adam_first_step_by_hand() {
    // m = 0.05, v = 0.00025; corrected: 0.5, 0.25; step = 1e-3 · 0.5 / (0.5 + 1e-8)
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut p = one_param(1.0);
    let mut s = AdamState::new(&p);
    adam_step(&mut p, &[vec![0.5]], &mut s, &cfg, 1e-3);
    let expect = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
    assert!((p.get(p.find("w").unwrap()).data()[0] as f64 - expect).abs() < 1e-7);
    assert_eq!(s.t, 1);
}

#[test]
fn adam_constant_gradient_steps_by_lr() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut p = ParamStore::new();
    let id = p.add("w", Tensor::full(&[1], 100.0f32)).unwrap();
    let mut s = AdamState::new(&p);
    let mut prev = 100.0f64;
    for t in 0..2000 {
        adam_step(&mut p, &[vec![-0.3]], &mut s, &cfg, 1e-3);
        let now = p.get(id).data()[0] as f64;
        if t > 1000 {
            assert!(((now - prev) - 1e-3).abs() < 2e-5, "step {}", now - prev);
        }
        prev = now;
    }
}

#[test]
fn cosine_schedule_examples() {
    let c = TrainConfig::default();
    assert!((cosine_lr(0.0, &c).unwrap() - 1e-4).abs() < 1e-18);
    assert!((cosine_lr(50.0, &c).unwrap() - 1e-6).abs() < 1e-18);
    assert!((cosine_lr(25.0, &c).unwrap() - (1e-4 + 1e-6) / 2.0).abs() < 1e-15);
    assert!(cosine_lr(-1.0, &c).is_err());
    let lrs: Vec<f64> = (0..=100).map(|i| cosine_lr(i as f64 * 0.5, &c).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn clipping_examples() {
    let mut g = vec![vec![3.0f32, 0.0], vec![0.0]];
    assert!((clip_gradients(&mut g, 5.0) - 3.0).abs() < 1e-12);
    assert_eq!(g, vec![vec![3.0, 0.0], vec![0.0]]);
    let mut g = vec![vec![6.0f32], vec![8.0]];
    assert!((clip_gradients(&mut g, 5.0) - 10.0).abs() < 1e-12);
    assert_eq!(g, vec![vec![3.0], vec![4.0]]);
    let mut z = vec![vec![0.0f32; 3]];
    assert_eq!(clip_gradients(&mut z, 5.0), 0.0);
    assert_eq!(z, vec![vec![0.0; 3]]);
}

#[test]
fn mask_sampling_rates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        assert_eq!(sample_mask(0.0, &mut rng), ModalityMask::all());
    }
    // exact conditional rate: enumerate the 7 valid outcomes
    let p = 0.3f64;
    let (mut num, mut den) = (0.0, 0.0);
    for bits in 1u32..8 {
        let prob: f64 = (0..3).map(|i| if (bits >> i) & 1 == 1 { 1.0 - p } else { p }).product();
        den += prob;
        if bits & 1 == 0 {
            num += prob;
        }
    }
    let expected = num / den;
    let draws = 100_000;
    let mut dropped = [0usize; 3];
    for _ in 0..draws {
        let m = sample_mask(p, &mut rng);
        assert!(m.any());
        for i in 0..3 {
            dropped[i] += usize::from(!m.flags[i]);
        }
    }
    for d in dropped {
        assert!((d as f64 / draws as f64 - expected).abs() < 0.01, "{d}");
    }
}

#[test]
fn mask_never_all_false() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!((0..1_000_000).all(|_| sample_mask(0.9, &mut rng).any()));
}

#[test]
fn inverse_frequency_weights_average_one() {
    // label 0 in half the rows, label 1 in a quarter, 2 and 3 absent
    let rows: Vec<f32> = (0..8)
        .flat_map(|i| [f32::from(i % 2 == 0), f32::from(i % 4 == 0), 0.0, 0.0])
        .collect();
    let w = inverse_frequency_weights([rows.as_slice()]);
    assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
    assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
    assert_eq!(w[2], w[3]);
}

#[test]
fn flips_count_threshold_crossings() {
    let probs = [0.1, 0.9, 0.0, 0.0, 0.6, 0.9, 0.0, 0.0, 0.2, 0.1, 0.0, 0.0];
    assert_eq!(prediction_flips(&probs, 3, 0.5), 3);
    assert_eq!(prediction_flips(&probs, 1, 0.5), 0);
}

proptest! {
    #[test]
    fn painted_targets_decode_back(
        spans in proptest::collection::vec((0usize..4, 3.0f64..60.0, 2.0f64..40.0), 1..5),
    ) {
        use crate::events::{decode, DecodeConfig};
        let cfg = DecodeConfig::default();
        // lay events out per label with gaps so same-label targets never touch
        let mut cursor = [1.0f64; 4];
        let mut events = Vec::new();
        for (k, dur, gap) in spans {
            let label = EventLabel::from_index(k).unwrap();
            let dur = dur.max(cfg.min_duration_s[k]);
            let on = cursor[k];
            if on + dur > EPOCH_S - 1.0 {
                continue;
            }
            events.push(ev(on, on + dur, label));
            cursor[k] = on + dur + gap.max(25.0);
        }
        let (t, fails) = build_targets(&events, &DefaultWindows::standard(), T_OUT, BIN_S);
        prop_assert!(fails.is_empty());
        let decoded = decode(&t, &cfg, 0.0, BIN_S);
        for e in &events {
            let best = decoded
                .iter()
                .filter(|d| d.label == e.label)
                .map(|d| interval_iou(d, e))
                .fold(0.0, f64::max);
            prop_assert!(best >= 0.5, "{e:?} best {best} in {decoded:?}");
        }
    }
}
