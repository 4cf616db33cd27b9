//! Polyphase Hann-windowed-sinc resampling for rational rate ratios.

use std::f64::consts::PI;

use super::AudioClip;
use crate::error::{ensure, Result};

pub const TAPS_PER_PHASE: usize = 64;
/// Above this many phases the coefficient table is not materialised.
const MAX_TABLE_PHASES: u64 = 4096;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Coefficients for fractional offset `frac` in [0, 1), summing to one.
/// Tap `j` weighs input sample `floor(t) + j - (TAPS/2 - 1)`.
fn phase_coefficients(frac: f64, cutoff: f64, out: &mut [f64]) {
    let half = TAPS_PER_PHASE as f64 / 2.0;
    let centre = (TAPS_PER_PHASE / 2 - 1) as f64;
    let mut sum = 0.0;
    for (j, c) in out.iter_mut().enumerate() {
        let u = j as f64 - centre - frac;
        let w = if u.abs() < half { 0.5 * (1.0 + (PI * u / half).cos()) } else { 0.0 };
        *c = cutoff * sinc(cutoff * u) * w;
        sum += *c;
    }
    out.iter_mut().for_each(|c| *c /= sum);
}

/// Resamples `x` from rate `from` to rate `to`; the output has
/// `round(len * to / from)` samples.
pub fn resample_samples(x: &[f64], from: u64, to: u64) -> Result<Vec<f64>> {
    ensure!(from > 0 && to > 0, "sample rates must be positive, got {from} -> {to}");
    if from == to {
        return Ok(x.to_vec());
    }
    let g = gcd(from, to);
    let (up, down) = (to / g, from / g);
    let out_len = ((x.len() as u128 * to as u128 + from as u128 / 2) / from as u128) as usize;
    let cutoff = (to as f64 / from as f64).min(1.0);
    let table: Option<Vec<f64>> = (up <= MAX_TABLE_PHASES).then(|| {
        let mut t = vec![0.0; up as usize * TAPS_PER_PHASE];
        for (p, row) in t.chunks_exact_mut(TAPS_PER_PHASE).enumerate() {
            phase_coefficients(p as f64 / up as f64, cutoff, row);
        }
        t
    });
    let mut scratch = [0.0; TAPS_PER_PHASE];
    let lead = (TAPS_PER_PHASE / 2 - 1) as i64;
    let mut y = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        // input position n * down / up
        let num = n as u128 * down as u128;
        let base = (num / up as u128) as i64;
        let phase = (num % up as u128) as u64;
        let coeffs: &[f64] = match &table {
            Some(t) => &t[phase as usize * TAPS_PER_PHASE..][..TAPS_PER_PHASE],
            None => {
                phase_coefficients(phase as f64 / up as f64, cutoff, &mut scratch);
                &scratch
            }
        };
        let start = base - lead;
        let mut acc = 0.0;
        for (j, &c) in coeffs.iter().enumerate() {
            let i = start + j as i64;
            if i >= 0 && (i as usize) < x.len() {
                acc += c * x[i as usize];
            }
        }
        y.push(acc);
    }
    Ok(y)
}

pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    let samples = resample_samples(&clip.samples, clip.sample_rate as u64, target_rate as u64)?;
    let mut out = clip.with_samples(samples);
    out.sample_rate = target_rate;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_rate_is_untouched() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(resample_samples(&x, 16000, 16000).unwrap(), x);
    }

    #[test]
    fn phases_sum_to_one() {
        let mut c = [0.0; TAPS_PER_PHASE];
        for frac in [0.0, 0.25, 0.9] {
            phase_coefficients(frac, 0.36, &mut c);
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_is_preserved() {
        let x = vec![1.0; 4410];
        let y = resample_samples(&x, 44100, 16000).unwrap();
        assert_eq!(y.len(), 1600);
        for v in &y[40..1560] {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn output_length_rounds() {
        assert_eq!(resample_samples(&[0.0; 10], 3, 2).unwrap().len(), 7);
        assert_eq!(resample_samples(&[0.0; 7], 16000, 44100).unwrap().len(), 19);
    }

    #[test]
    fn zero_rate_is_rejected() {
        assert!(resample_samples(&[1.0], 0, 16000).is_err());
    }
}
