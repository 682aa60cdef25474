use osa_detect::synth::{generate, oracle_score, EventRates, GeneratorConfig};
use osa_detect::{interval_iou, EventInterval, EventLabel};

/// Greedy one-to-one matching per label at the given IoU threshold:
/// returns (true positives, predictions, references).
fn match_counts(pred: &[EventInterval], truth: &[EventInterval], thr: f64) -> (usize, usize, usize) {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let iou = interval_iou(p, t);
            if p.label == t.label && iou >= thr {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut used_p, mut used_t) = (vec![false; pred.len()], vec![false; truth.len()]);
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            tp += 1;
        }
    }
    (tp, pred.len(), truth.len())
}

#[test]
fn oracle_recovers_generator_annotations() {
    let (mut tp, mut np, mut nt) = (0, 0, 0);
    for seed in 0..20 {
        let cfg = GeneratorConfig {
            seed,
            noise_std: GeneratorConfig::LOW_NOISE_MAX,
            ..Default::default()
        };
        assert!(cfg.noise_std <= GeneratorConfig::LOW_NOISE_MAX);
        let rec = generate(&cfg).unwrap();
        let pred = oracle_score(&rec).events;
        let (a, b, c) = match_counts(&pred, &rec.annotations, 0.5);
        if a != b || a != c {
            for label in EventLabel::ALL {
                let p: Vec<_> = pred.iter().filter(|e| e.label == label).copied().collect();
                let t: Vec<_> = rec.annotations.iter().filter(|e| e.label == label).copied().collect();
                let (x, y, z) = match_counts(&p, &t, 0.5);
                if x != y || x != z {
                    eprintln!("seed {seed} {label:?}: tp {x} pred {y} truth {z}");
                }
            }
        }
        tp += a;
        np += b;
        nt += c;
    }
    let f1 = 2.0 * tp as f64 / (np + nt) as f64;
    eprintln!("closed-loop F1 {f1:.4} ({tp} / {np} pred / {nt} truth)");
    assert!(f1 >= 0.99, "closed-loop F1 {f1}");
}

#[test]
fn apnea_count_matches_poisson_mean() {
    let n = 100;
    let total: usize = (0..n)
        .map(|seed| {
            let cfg = GeneratorConfig {
                seed,
                event_rate_per_h: EventRates {
                    apnea: 30.0,
                    ..EventRates::ZERO
                },
                ..Default::default()
            };
            let rec = generate(&cfg).unwrap();
            rec.annotations.iter().filter(|e| e.label == EventLabel::Apnea).count()
        })
        .sum();
    // mean of 100 Poisson(30) draws: sd = sqrt(30 / 100); 99 % two-sided band
    let mean = total as f64 / n as f64;
    let half_width = 2.576 * (30.0f64 / n as f64).sqrt();
    assert!((mean - 30.0).abs() <= half_width, "mean apnea count {mean}");
}

#[test]
fn higher_rates_do_not_reduce_event_counts() {
    let count = |rate: f64| -> usize {
        (0..10)
            .map(|seed| {
                let cfg = GeneratorConfig {
                    seed,
                    duration_min: 30.0,
                    event_rate_per_h: EventRates {
                        apnea: rate,
                        hypopnea: rate,
                        arousal: rate / 2.0,
                        desaturation: rate / 2.0,
                    },
                    ..Default::default()
                };
                generate(&cfg).unwrap().annotations.len()
            })
            .sum()
    };
    let counts: Vec<usize> = [2.0, 8.0, 16.0, 24.0].into_iter().map(count).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
}
