//! Windowed-sinc polyphase rate conversion.

use crate::domain::SampleSeries;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel kept on each side.
const ZERO_CROSSINGS: f64 = 16.0;
/// Passband edge as a fraction of the lower Nyquist frequency.
const CUTOFF: f64 = 0.95;
/// Phase table size used when the rate ratio is not a small rational.
const FALLBACK_PHASES: u64 = 4096;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `target/source = up/down` in lowest terms, if representable with
/// millihertz precision and a phase table of reasonable size.
fn rational_ratio(source_hz: f64, target_hz: f64) -> Option<(u64, u64)> {
    let s = (source_hz * 1000.0).round();
    let t = (target_hz * 1000.0).round();
    if (s - source_hz * 1000.0).abs() > 1e-6 || (t - target_hz * 1000.0).abs() > 1e-6 {
        return None;
    }
    let (s, t) = (s as u64, t as u64);
    let g = gcd(s, t);
    let (up, down) = (t / g, s / g);
    (up <= FALLBACK_PHASES).then_some((up, down))
}

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    let a = std::f64::consts::PI * (x + 1.0);
    0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Tap weights for one fractional input offset, normalized to unit DC gain.
fn phase_taps(frac: f64, fc: f64, half: isize) -> Vec<f64> {
    let width = half as f64;
    let mut taps: Vec<f64> = (-half + 1..=half)
        .map(|j| {
            let t = j as f64 - frac;
            if t.abs() >= width {
                0.0
            } else {
                2.0 * fc * sinc(2.0 * fc * t) * blackman(t / width)
            }
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|w| *w /= s);
    taps
}

/// Converts `series` to `target_hz`.
///
/// The output has `ceil(n·target/source)` samples; sample `n` sits at time
/// `n/target_hz`. Samples beyond either end are replicated from the edge.
pub fn resample(series: &SampleSeries, target_hz: f64) -> Result<SampleSeries> {
    if !(target_hz.is_finite() && target_hz > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target rate must be positive, got {target_hz}"
        )));
    }
    let src_hz = series.rate_hz;
    if (src_hz - target_hz).abs() < 1e-12 {
        return Ok(series.clone());
    }
    let x = &series.samples;
    let n_in = x.len();
    let ratio = target_hz / src_hz;
    let n_out = ((n_in as f64 * ratio) - 1e-9).ceil().max(1.0) as usize;

    // cutoff in cycles per input sample
    let fc = 0.5 * CUTOFF * ratio.min(1.0);
    let half = (ZERO_CROSSINGS / (2.0 * fc)).ceil() as isize;
    let (phases, exact) = match rational_ratio(src_hz, target_hz) {
        Some((up, down)) => (up, Some((up, down))),
        None => (FALLBACK_PHASES, None),
    };
    let table: Vec<Vec<f64>> = (0..phases)
        .map(|p| phase_taps(p as f64 / phases as f64, fc, half))
        .collect();

    let last = n_in as isize - 1;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let (base, phase) = match exact {
            Some((up, down)) => {
                let num = n as u64 * down;
                ((num / up) as isize, (num % up) as usize)
            }
            None => {
                let u = n as f64 / ratio;
                let base = u.floor();
                let p = ((u - base) * phases as f64).round() as u64;
                if p == phases {
                    (base as isize + 1, 0)
                } else {
                    (base as isize, p as usize)
                }
            }
        };
        let taps = &table[phase];
        let mut acc = 0.0f64;
        for (j, &w) in (-half + 1..=half).zip(taps) {
            let idx = (base + j).clamp(0, last) as usize;
            acc += w * x[idx] as f64;
        }
        out.push(acc as f32);
    }
    SampleSeries::new(series.kind, target_hz, out)
}
