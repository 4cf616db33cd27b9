//! Phase-vocoder time stretch followed by resampling back to the original
//! length.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::resample::resample_samples;
use super::AudioClip;
use crate::error::{ensure, Result};

pub const MAX_SEMITONES: f64 = 12.0;
const FRAME: usize = 1024;
const HOP: usize = 256;

fn hann(n: usize) -> Vec<f64> {
    // periodic window, so 4x overlap sums to a constant
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn wrap(p: f64) -> f64 {
    p - 2.0 * PI * ((p + PI) / (2.0 * PI)).floor()
}

/// Stretches `x` in time by `rate` (> 1 lengthens) without changing pitch.
fn time_stretch(x: &[f64], rate: f64) -> Vec<f64> {
    let half = FRAME / 2;
    let mut padded = vec![0.0; half];
    padded.extend_from_slice(x);
    padded.resize(padded.len() + FRAME, 0.0);

    let window = hann(FRAME);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(FRAME);
    let inv = planner.plan_fft_inverse(FRAME);

    let ana_hop = HOP as f64 / rate;
    let out_len = (x.len() as f64 * rate).round() as usize;
    let frames = ((x.len() + half) as f64 / ana_hop).ceil() as usize + 1;
    let mut out = vec![0.0; frames * HOP + FRAME];
    let mut norm = vec![0.0; out.len()];

    let bins = FRAME / 2 + 1;
    let mut last_phase = vec![0.0; bins];
    let mut synth_phase = vec![0.0; bins];
    let mut last_pos = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); FRAME];

    for k in 0..frames {
        let pos = (k as f64 * ana_hop).round() as usize;
        if pos + FRAME > padded.len() {
            break;
        }
        for i in 0..FRAME {
            buf[i] = Complex::new(padded[pos + i] * window[i], 0.0);
        }
        fwd.process(&mut buf);
        let step = (pos - last_pos) as f64;
        for b in 0..bins {
            let phase = buf[b].arg();
            if k == 0 {
                synth_phase[b] = phase;
            } else {
                let omega = 2.0 * PI * b as f64 / FRAME as f64;
                let freq = if step > 0.0 { omega + wrap(phase - last_phase[b] - omega * step) / step } else { omega };
                synth_phase[b] += freq * HOP as f64;
            }
            last_phase[b] = phase;
            buf[b] = Complex::from_polar(buf[b].norm(), synth_phase[b]);
        }
        for b in 1..FRAME - bins + 1 {
            buf[FRAME - b] = buf[b].conj();
        }
        inv.process(&mut buf);
        let at = k * HOP;
        for i in 0..FRAME {
            out[at + i] += buf[i].re / FRAME as f64 * window[i];
            norm[at + i] += window[i] * window[i];
        }
        last_pos = pos;
    }
    (0..out_len)
        .map(|i| {
            let j = i + half;
            if j < out.len() && norm[j] > 1e-8 {
                out[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect()
}

/// Shifts pitch by `semitones` keeping the length fixed.
pub fn pitch_shift(clip: &AudioClip, semitones: f64) -> Result<AudioClip> {
    ensure!(
        semitones.is_finite() && semitones.abs() <= MAX_SEMITONES,
        "pitch shift must be within ±{MAX_SEMITONES} semitones, got {semitones}"
    );
    if clip.is_empty() || semitones == 0.0 {
        return Ok(clip.clone());
    }
    let rate = 2f64.powf(semitones / 12.0);
    let stretched = time_stretch(&clip.samples, rate);
    let mut y = resample_samples(&stretched, stretched.len().max(1) as u64, clip.len() as u64)?;
    y.resize(clip.len(), 0.0);
    Ok(clip.with_samples(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_stretch_reconstructs() {
        let x: Vec<f64> = (0..6000).map(|i| (i as f64 * 0.05).sin() * 0.5 + (i as f64 * 0.31).cos() * 0.2).collect();
        let y = time_stretch(&x, 1.0);
        assert_eq!(y.len(), x.len());
        for i in 600..5400 {
            assert!((x[i] - y[i]).abs() < 1e-9, "{i}: {} vs {}", x[i], y[i]);
        }
    }

    #[test]
    fn range_is_enforced() {
        let c = AudioClip::new(vec![0.0; 10], 16000);
        assert!(pitch_shift(&c, 12.5).is_err());
        assert!(pitch_shift(&c, -13.0).is_err());
        assert_eq!(pitch_shift(&c, 3.0).unwrap().len(), 10);
    }
}
