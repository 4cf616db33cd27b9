use std::f64::consts::PI;

use rand::Rng;

use super::{AudioClip, NoisySample};
use crate::error::{ensure, Error, Result};

pub const UPSAMPLE_FACTOR: usize = 4;
pub const UPSAMPLE_TAPS: usize = 127;

/// Uniformly random window of `duration_s`, or right zero-padding.
pub fn crop_or_pad<R: Rng + ?Sized>(clip: &AudioClip, duration_s: f64, rng: &mut R) -> Result<AudioClip> {
    ensure!(duration_s.is_finite() && duration_s > 0.0, "duration must be positive, got {duration_s}");
    let n = (duration_s * clip.sample_rate as f64).round() as usize;
    ensure!(n > 0, "duration {duration_s} s is shorter than one sample");
    let samples = if clip.len() > n {
        let start = rng.gen_range(0..=clip.len() - n);
        clip.samples[start..start + n].to_vec()
    } else {
        let mut s = clip.samples.clone();
        s.resize(n, 0.0);
        s
    };
    Ok(clip.with_samples(samples))
}

pub fn normalize_peak(clip: &AudioClip) -> AudioClip {
    let peak = clip.peak();
    if peak > 0.0 {
        clip.with_samples(clip.samples.iter().map(|x| x / peak).collect())
    } else {
        clip.clone()
    }
}

/// `y[0] = x[0]`, `y[t] = x[t] - coeff * x[t-1]`.
pub fn pre_emphasis(clip: &AudioClip, coeff: f64) -> AudioClip {
    let x = &clip.samples;
    let y = (0..x.len()).map(|t| if t == 0 { x[0] } else { x[t] - coeff * x[t - 1] }).collect();
    clip.with_samples(y)
}

/// Inverse of [`pre_emphasis`].
pub fn de_emphasis(clip: &AudioClip, coeff: f64) -> AudioClip {
    let mut y = Vec::with_capacity(clip.len());
    let mut prev = 0.0;
    for &v in &clip.samples {
        prev = v + coeff * prev;
        y.push(prev);
    }
    clip.with_samples(y)
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

pub fn rms_normalize(clip: &AudioClip, target_rms: f64) -> Result<AudioClip> {
    ensure!(target_rms.is_finite() && target_rms > 0.0, "target RMS must be positive, got {target_rms}");
    let r = rms(&clip.samples);
    if r == 0.0 {
        return Ok(clip.clone());
    }
    let g = target_rms / r;
    Ok(clip.with_samples(clip.samples.iter().map(|x| x * g).collect()))
}

/// `10 log10(P_signal / P_noise)`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(signal) / power(noise)).log10()
}

/// Adds a random window of `noise`, scaled to `snr_db`, to `clean`. Both
/// outputs are then divided by `max(1, peak)` so they stay in [-1, 1];
/// the common factor leaves the SNR unchanged.
pub fn mix_at_snr<R: Rng + ?Sized>(
    clean: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    rng: &mut R,
) -> Result<NoisySample> {
    ensure!(snr_db.is_finite(), "SNR must be finite, got {snr_db}");
    ensure!(clean.sample_rate == noise.sample_rate, "noise rate {} differs from clip rate {}", noise.sample_rate, clean.sample_rate);
    ensure!(
        noise.len() >= clean.len(),
        "noise ({} samples) is shorter than the clip ({} samples)",
        noise.len(),
        clean.len()
    );
    let pc = power(&clean.samples);
    ensure!(pc > 0.0, "clean clip is silent; SNR is undefined");
    let start = rng.gen_range(0..=noise.len() - clean.len());
    let window = &noise.samples[start..start + clean.len()];
    let pn = power(window);
    ensure!(pn > 0.0, "noise window is silent; SNR is undefined");
    let alpha = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy: Vec<f64> = clean.samples.iter().zip(window).map(|(c, n)| c + alpha * n).collect();
    let peak = noisy.iter().chain(&clean.samples).fold(1.0f64, |m, x| m.max(x.abs()));
    let clean_out = clean.with_samples(clean.samples.iter().map(|x| x / peak).collect());
    let noisy_out = clean.with_samples(noisy.iter().map(|x| x / peak).collect());
    Ok(NoisySample { clean: clean_out, noisy: noisy_out, snr_db, noise_kind: noise.source_id.clone() })
}

/// Hann-windowed sinc low-pass with `cutoff` in cycles per sample,
/// normalised to unit DC gain.
pub fn lowpass_fir(taps: usize, cutoff: f64) -> Vec<f64> {
    let m = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|k| {
            let u = k as f64 - m;
            let s = if u == 0.0 { 2.0 * cutoff } else { (2.0 * PI * cutoff * u).sin() / (PI * u) };
            let w = 0.5 - 0.5 * (2.0 * PI * k as f64 / (taps - 1) as f64).cos();
            s * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Zero-phase anti-alias filter at half the new Nyquist, then keep every
/// `factor`-th sample.
pub fn decimate_lowpass(x: &[f64], factor: usize) -> Vec<f64> {
    let h = lowpass_fir(UPSAMPLE_TAPS, 0.5 / factor as f64);
    let mid = (UPSAMPLE_TAPS / 2) as isize;
    (0..x.len())
        .step_by(factor)
        .map(|n| {
            h.iter()
                .enumerate()
                .map(|(k, c)| {
                    let i = n as isize + mid - k as isize;
                    if i >= 0 && (i as usize) < x.len() {
                        c * x[i as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Low-resolution input (each decimated sample held for four frames) and
/// the original clip as target.
pub fn make_upsample_pair(clip: &AudioClip) -> Result<(AudioClip, AudioClip)> {
    if clip.len() < UPSAMPLE_TAPS {
        return Err(Error::invalid(format!(
            "upsampling needs at least {UPSAMPLE_TAPS} samples, got {}",
            clip.len()
        )));
    }
    let low = decimate_lowpass(&clip.samples, UPSAMPLE_FACTOR);
    let mut held: Vec<f64> = low.iter().flat_map(|&v| [v; UPSAMPLE_FACTOR]).collect();
    held.truncate(clip.len());
    Ok((clip.with_samples(held), clip.clone()))
}

/// Target is the clip advanced by one sample; its last frame is zero and
/// excluded from the loss.
pub fn next_step_pair(clip: &AudioClip) -> (AudioClip, AudioClip) {
    let mut target: Vec<f64> = clip.samples.iter().skip(1).copied().collect();
    if !clip.is_empty() {
        target.push(0.0);
    }
    (clip.clone(), clip.with_samples(target))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn clip(s: Vec<f64>) -> AudioClip {
        AudioClip::new(s, 16000)
    }

    #[test]
    fn short_clip_is_padded() {
        let c = clip(vec![0.5; 16000]);
        let out = crop_or_pad(&c, 2.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.len(), 32000);
        assert!(out.samples[16000..].iter().all(|&v| v == 0.0));
        assert!(out.samples[..16000].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn exact_length_is_unchanged() {
        let c = clip((0..32000).map(|i| i as f64 / 32000.0).collect());
        for seed in 0..5 {
            assert_eq!(crop_or_pad(&c, 2.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(), c);
        }
    }

    #[test]
    fn bad_duration_is_rejected() {
        let c = clip(vec![0.0; 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(crop_or_pad(&c, 0.0, &mut rng).is_err());
        assert!(crop_or_pad(&c, -1.0, &mut rng).is_err());
    }

    #[test]
    fn peak_normalisation() {
        let out = normalize_peak(&clip(vec![1.0, -2.0, 0.5]));
        assert_eq!(out.samples, vec![0.5, -1.0, 0.25]);
        assert_eq!(normalize_peak(&clip(vec![0.0; 4])).samples, vec![0.0; 4]);
    }

    #[test]
    fn pre_emphasis_of_dc() {
        let y = pre_emphasis(&clip(vec![1.0; 5]), 0.97).samples;
        assert_eq!(y[0], 1.0);
        for v in &y[1..] {
            assert!((v - 0.03).abs() < 1e-15);
        }
        let x = clip(vec![0.3, -0.2, 0.9]);
        assert_eq!(pre_emphasis(&x, 0.0), x);
    }

    #[test]
    fn rms_normalisation() {
        let c = clip(vec![0.1, -0.1, 0.1, -0.1]);
        assert_eq!(rms_normalize(&c, 0.1).unwrap().samples, c.samples);
        let s = clip(vec![0.0; 3]);
        assert_eq!(rms_normalize(&s, 0.1).unwrap(), s);
    }

    #[test]
    fn equal_power_at_zero_db_adds_unscaled_noise() {
        let c = clip(vec![0.1, -0.1, 0.1, -0.1]);
        let n = clip(vec![-0.1, 0.1, 0.1, 0.1]);
        let s = mix_at_snr(&c, &n, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for ((y, a), b) in s.noisy.samples.iter().zip(&c.samples).zip(&n.samples) {
            assert!((y - (a + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn silent_inputs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = clip(vec![0.1, 0.2]);
        let z = clip(vec![0.0, 0.0]);
        assert!(mix_at_snr(&z, &c, 10.0, &mut rng).is_err());
        assert!(mix_at_snr(&c, &z, 10.0, &mut rng).is_err());
        assert!(mix_at_snr(&c, &clip(vec![0.1]), 10.0, &mut rng).is_err());
    }

    #[test]
    fn high_snr_limit() {
        let c = clip((0..100).map(|i| (i as f64 * 0.1).sin() * 0.5).collect());
        let n = clip((0..150).map(|i| (i as f64 * 0.7).cos() * 0.5).collect());
        let s = mix_at_snr(&c, &n, 200.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let xi: Vec<f64> = s.noisy.samples.iter().zip(&s.clean.samples).map(|(a, b)| a - b).collect();
        assert!(rms(&xi) / rms(&s.clean.samples) < 1e-9);
    }

    #[test]
    fn constant_survives_upsample_pair() {
        let c = clip(vec![0.4; 400]);
        let (input, target) = make_upsample_pair(&c).unwrap();
        assert_eq!(target, c);
        assert_eq!(input.len(), 400);
        for v in &input.samples[80..320] {
            assert!((v - 0.4).abs() < 1e-12);
        }
        assert!(make_upsample_pair(&clip(vec![0.0; 126])).is_err());
    }

    #[test]
    fn next_step_ramp() {
        let (x, y) = next_step_pair(&clip(vec![0.0, 1.0, 2.0, 3.0]));
        assert_eq!(x.samples, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&y.samples[..3], &[1.0, 2.0, 3.0]);
        assert_eq!(y.len(), 4);
    }
}
