//! Second-order sections and zero-phase filtering.

use std::f64::consts::PI;

/// Direct-form biquad with `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

/// Section Q factors of a 4th-order Butterworth prototype.
pub const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_6];

impl Biquad {
    pub fn lowpass(cutoff_hz: f64, rate_hz: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / rate_hz;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b1 = (1.0 - cos) / a0;
        Self {
            b: [b1 / 2.0, b1, b1 / 2.0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn highpass(cutoff_hz: f64, rate_hz: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / rate_hz;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b1 = (1.0 + cos) / a0;
        Self {
            b: [b1 / 2.0, -b1, b1 / 2.0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    /// In-place transposed direct form II, starting from rest.
    pub fn apply(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b[0] * *v + z1;
            z1 = self.b[1] * *v - self.a[0] * y + z2;
            z2 = self.b[2] * *v - self.a[1] * y;
            *v = y;
        }
    }

    /// Magnitude response at `freq_hz`.
    pub fn gain(&self, freq_hz: f64, rate_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / rate_hz;
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b[0] + self.b[1] * c1 + self.b[2] * c2, self.b[1] * s1 + self.b[2] * s2);
        let den = (1.0 + self.a[0] * c1 + self.a[1] * c2, self.a[0] * s1 + self.a[1] * s2);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// 4th-order Butterworth band-pass as a cascade of four sections.
pub fn butterworth_bandpass(low_hz: f64, high_hz: f64, rate_hz: f64) -> Vec<Biquad> {
    let mut s: Vec<Biquad> = BUTTER4_Q
        .iter()
        .map(|&q| Biquad::highpass(low_hz, rate_hz, q))
        .collect();
    s.extend(BUTTER4_Q.iter().map(|&q| Biquad::lowpass(high_hz, rate_hz, q)));
    s
}

/// Forward-backward filtering (zero phase, squared magnitude).
///
/// The signal is extended at both ends by odd reflection about the end
/// samples so the start-up transient decays outside the returned range.
pub fn filtfilt(sections: &[Biquad], x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = pad.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    for s in sections {
        s.apply(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.apply(&mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn butterworth_half_power_at_cutoff() {
        let fs = 100.0;
        let lp: f64 = BUTTER4_Q
            .iter()
            .map(|&q| Biquad::lowpass(20.0, fs, q).gain(20.0, fs))
            .product();
        assert!((lp - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        let hp: f64 = BUTTER4_Q
            .iter()
            .map(|&q| Biquad::highpass(2.0, fs, q).gain(2.0, fs))
            .product();
        assert!((hp - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn filtfilt_has_no_delay() {
        // a symmetric pulse stays centred after zero-phase low-pass filtering
        let mut x = vec![0.0; 401];
        x[200] = 1.0;
        let s: Vec<Biquad> = BUTTER4_Q.iter().map(|&q| Biquad::lowpass(5.0, 100.0, q)).collect();
        let y = filtfilt(&s, &x, 100);
        let peak = y
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 200);
        for k in 1..50 {
            assert!((y[200 - k] - y[200 + k]).abs() < 1e-6);
        }
    }
}
