//! Recursive bandpass realised as a Butterworth high-pass/low-pass biquad
//! pair (4th order overall), run forward and backward for zero phase.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    // Bilinear-transform designs with Q = 1/sqrt(2) (maximally flat).
    fn lowpass(fc: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        let b1 = (1.0 - cos) / a0;
        Self {
            b: [b1 / 2.0, b1, b1 / 2.0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn highpass(fc: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        let b0 = (1.0 + cos) / 2.0 / a0;
        Self {
            b: [b0, -2.0 * b0, b0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    /// Direct form II transposed, zero initial state.
    fn run(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let input = *v;
            let out = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * out + z2;
            z2 = self.b[2] * input - self.a[1] * out;
            *v = out;
        }
    }
}

/// Zero-phase bandpass. The output has the same length as the input.
pub fn bandpass_zero_phase(x: &[f64], fs: f64, low: f64, high: f64) -> Result<Vec<f64>> {
    if !(low > 0.0 && low < high) {
        return Err(Error::Config(format!(
            "band edges must satisfy 0 < low < high (got {low}, {high})"
        )));
    }
    if high >= fs / 2.0 {
        return Err(Error::Config(format!(
            "band edge {high} Hz is at or above Nyquist ({} Hz)",
            fs / 2.0
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Data("signal too short to filter".into()));
    }
    let stages = [Biquad::highpass(low, fs), Biquad::lowpass(high, fs)];

    // Odd reflection about the end points keeps edge transients small.
    let pad = (fs.round() as usize).min(n - 1);
    let mut buf = Vec::with_capacity(n + 2 * pad);
    buf.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    buf.extend_from_slice(x);
    buf.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    for s in &stages {
        s.run(&mut buf);
    }
    buf.reverse();
    for s in &stages {
        s.run(&mut buf);
    }
    buf.reverse();
    Ok(buf[pad..pad + n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn sine(f: f64, fs: f64, secs: f64) -> Vec<f64> {
        (0..(fs * secs) as usize)
            .map(|k| (2.0 * PI * f * k as f64 / fs).sin())
            .collect()
    }

    // Gains are measured on the central part of a 20 s sinusoid so edge
    // handling does not enter the ratio.
    fn gain_db(f: f64) -> f64 {
        let fs = 256.0;
        let x = sine(f, fs, 20.0);
        let y = bandpass_zero_phase(&x, fs, 4.0, 30.0).unwrap();
        let mid = 5 * 256..15 * 256;
        20.0 * (rms(&y[mid.clone()]) / rms(&x[mid])).log10()
    }

    #[test]
    fn stopband_below_low_edge() {
        assert!(gain_db(1.0) <= -20.0, "{} dB", gain_db(1.0));
    }

    #[test]
    fn passband_inside_band() {
        let g = gain_db(10.0);
        assert!(g.abs() <= 3.0, "{g} dB");
    }

    #[test]
    fn zero_in_zero_out() {
        let y = bandpass_zero_phase(&vec![0.0; 1000], 256.0, 4.0, 30.0).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_band_above_nyquist() {
        assert!(bandpass_zero_phase(&[0.0; 100], 50.0, 4.0, 30.0).is_err());
        assert!(bandpass_zero_phase(&[0.0; 100], 256.0, 30.0, 4.0).is_err());
    }

    #[test]
    fn zero_phase_preserves_symmetric_pulse_centre() {
        let fs = 256.0;
        let mut x = vec![0.0; 1024];
        for (k, v) in x.iter_mut().enumerate() {
            let t = (k as f64 - 500.0) / fs;
            *v = (-0.5 * (t / 0.01).powi(2)).exp();
        }
        let y = bandpass_zero_phase(&x, fs, 4.0, 30.0).unwrap();
        let argmax = y
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 500);
    }
}
