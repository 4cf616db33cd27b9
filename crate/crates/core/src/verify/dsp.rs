//! Signal-processing invariants of the audio pipeline.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audiopipe::{
    crop_or_pad, de_emphasis, make_upsample_pair, mix_at_snr, pitch_shift, pre_emphasis, resample, snr_db, AudioClip,
    NoiseKind, UPSAMPLE_FACTOR,
};
use crate::error::Result;

use super::CheckResult;

pub const SNR_CASES: usize = 1000;
pub const SNR_TOLERANCE_DB: f64 = 1e-6;
pub const EMPHASIS_TOLERANCE: f64 = 1e-6;
pub const RESAMPLE_MIN_CORRELATION: f64 = 0.999;

fn random_clip(rng: &mut ChaCha8Rng, len: usize) -> AudioClip {
    AudioClip::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16_000)
}

/// Largest `|measured - requested|` SNR over random clips, noise kinds
/// and targets.
pub fn snr_error(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];
    let mut worst = 0.0f64;
    for i in 0..cases {
        let len = rng.gen_range(64..2048);
        let amp = rng.gen_range(0.01..1.0);
        let clean = random_clip(&mut rng, len).with_samples((0..len).map(|_| amp * rng.gen_range(-1.0..1.0)).collect());
        let noise = kinds[i % 3].generate(len + rng.gen_range(0..512), 16_000, &mut rng);
        let target = rng.gen_range(-10.0..30.0);
        let mixed = mix_at_snr(&clean, &noise, target, &mut rng)?;
        let residual: Vec<f64> = mixed.noisy.samples.iter().zip(&mixed.clean.samples).map(|(n, c)| n - c).collect();
        worst = worst.max((snr_db(&mixed.clean.samples, &residual) - target).abs());
    }
    Ok(worst)
}

pub fn emphasis_error(coeff: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(1..4000);
        let c = random_clip(&mut rng, len);
        let back = de_emphasis(&pre_emphasis(&c, coeff), coeff);
        for (a, b) in c.samples.iter().zip(&back.samples) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Largest difference between two samples of the same hold block of the
/// low-resolution upsampling input.
pub fn upsample_hold_violation(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let len = rng.gen_range(127..3000);
        let (low, _) = make_upsample_pair(&random_clip(&mut rng, len))?;
        for block in low.samples.chunks(UPSAMPLE_FACTOR) {
            for v in block {
                worst = worst.max((v - block[0]).abs());
            }
        }
    }
    Ok(worst)
}

/// Correlation between a 440 Hz sine resampled `from -> to` and the
/// analytic sine at the new rate, away from the edges.
pub fn resample_correlation(from: u32, to: u32) -> Result<f64> {
    let f = 440.0;
    let n = from as usize;
    let x = AudioClip::new((0..n).map(|i| (2.0 * PI * f * i as f64 / from as f64).sin()).collect(), from);
    let y = resample(&x, to)?;
    let edge = y.len() / 10;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in edge..y.len() - edge {
        let r = (2.0 * PI * f * i as f64 / to as f64).sin();
        sxy += r * y.samples[i];
        sxx += r * r;
        syy += y.samples[i] * y.samples[i];
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Number of random crops whose length differs from the request.
pub fn crop_length_failures(seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..200 {
        let len = rng.gen_range(1..8000);
        let c = random_clip(&mut rng, len);
        let d = rng.gen_range(0.01..0.5);
        let out = crop_or_pad(&c, d, &mut rng)?;
        if out.len() != (d * 16_000.0).round() as usize {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Frequency of the largest spectral peak of `x`.
pub fn peak_frequency(x: &[f64], rate: u32) -> f64 {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| Complex::new(v * (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()), 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let k = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap_or(0);
    k as f64 * rate as f64 / n as f64
}

/// Distance in Hz between the spectral peak of a 400 Hz tone shifted by
/// +12 semitones and 800 Hz.
pub fn octave_shift_error() -> Result<f64> {
    let rate = 16_000;
    let x = AudioClip::new((0..16_000).map(|i| 0.5 * (2.0 * PI * 400.0 * i as f64 / rate as f64).sin()).collect(), rate);
    let y = pitch_shift(&x, 12.0)?;
    Ok((peak_frequency(&y.samples, rate) - 800.0).abs())
}

pub fn run() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let e = snr_error(SNR_CASES, 1)?;
    out.push(CheckResult::new("dsp.mix_at_snr", e, SNR_TOLERANCE_DB, e < SNR_TOLERANCE_DB));
    let e = emphasis_error(0.97, 2);
    out.push(CheckResult::new("dsp.pre_emphasis_round_trip", e, EMPHASIS_TOLERANCE, e < EMPHASIS_TOLERANCE));
    let e = upsample_hold_violation(3)?;
    out.push(CheckResult::new("dsp.upsample_hold", e, 0.0, e == 0.0));
    for (from, to) in [(44_100, 16_000), (8_000, 16_000)] {
        let c = resample_correlation(from, to)?;
        let gap = 1.0 - c;
        let tol = 1.0 - RESAMPLE_MIN_CORRELATION;
        out.push(CheckResult::new(format!("dsp.resample_{from}_{to}"), gap, tol, gap < tol));
    }
    let bad = crop_length_failures(4)?;
    out.push(CheckResult::new("dsp.crop_length", bad as f64, 0.0, bad == 0));
    // one FFT bin at 1 s
    let e = octave_shift_error()?;
    out.push(CheckResult::new("dsp.pitch_octave", e, 1.0, e <= 1.0));
    Ok(out)
}
