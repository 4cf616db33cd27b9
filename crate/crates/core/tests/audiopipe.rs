use std::f64::consts::PI;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavetrunk::audiopipe::*;

fn sine(freq: f64, rate: u32, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Brute-force DFT magnitude at bin `k`.
fn dft_mag(x: &[f64], k: usize) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (t, v) in x.iter().enumerate() {
        let a = -2.0 * PI * k as f64 * t as f64 / n;
        re += v * a.cos();
        im += v * a.sin();
    }
    (re * re + im * im).sqrt()
}

#[test]
fn pcm16_round_trip_is_sample_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<f64> = (0..2000).map(|_| rand::Rng::gen_range(&mut rng, -32768i32..32768) as f64 / 32768.0).collect();
    let clip = AudioClip::new(samples, 16000);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wav");
    save_wav(&p, &clip, SampleFormat::Pcm16).unwrap();
    let back = load_wav(&p).unwrap();
    assert_eq!(back.samples, clip.samples);
    assert_eq!(back.sample_rate, 16000);
}

#[test]
fn resampled_sine_matches_analytic_sine() {
    let x = AudioClip::new(sine(440.0, 44100, 44100, 0.8), 44100);
    let y = resample(&x, 16000).unwrap();
    assert_eq!(y.len(), 16000);
    let expect = sine(440.0, 16000, 16000, 0.8);
    let r = correlation(&y.samples[200..15800], &expect[200..15800]);
    assert!(r > 0.999, "correlation {r}");
}

#[test]
fn crop_start_is_uniform() {
    // window start recovered from a ramp; KS statistic against U{0..16000}
    let ramp = AudioClip::new((0..48000).map(|i| i as f64).collect(), 16000);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut starts: Vec<f64> = (0..10_000).map(|_| crop_or_pad(&ramp, 2.0, &mut rng).unwrap().samples[0]).collect();
    starts.sort_by(f64::total_cmp);
    let n = starts.len() as f64;
    let ks = starts
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cdf = (s + 1.0) / 16001.0;
            ((i + 1) as f64 / n - cdf).abs().max((cdf - i as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS {ks}");
    assert!(starts[0] >= 0.0 && *starts.last().unwrap() <= 16000.0);
}

#[test]
fn snr_is_met_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..20u64 {
        let clean = NoiseKind::Pink.generate(3000, 16000, &mut ChaCha8Rng::seed_from_u64(seed));
        let noise = NoiseKind::White.generate(5000, 16000, &mut ChaCha8Rng::seed_from_u64(seed + 100));
        let s = mix_at_snr(&clean, &noise, 12.3, &mut rng).unwrap();
        let xi: Vec<f64> = s.noisy.samples.iter().zip(&s.clean.samples).map(|(a, b)| a - b).collect();
        let p = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let measured = 10.0 * (p(&s.clean.samples) / p(&xi)).log10();
        assert!((measured - 12.3).abs() < 1e-6, "{measured}");
        assert_eq!(s.snr_db, 12.3);
    }
}

#[test]
fn upsample_input_tracks_lowpassed_original() {
    let rate = 16000;
    let low = sine(150.0, rate, 4000, 0.5);
    let high = sine(3500.0, rate, 4000, 0.4);
    let x: Vec<f64> = low.iter().zip(&high).map(|(a, b)| a + b).collect();
    let (input, _) = make_upsample_pair(&AudioClip::new(x.clone(), rate)).unwrap();
    let r = correlation(&input.samples[200..3800], &low[200..3800]);
    assert!(r > 0.99, "correlation {r}");

    // before repetition: the 3.5 kHz tone would alias to 500 Hz at 4 kHz;
    // 800 samples put both tones on exact bins
    let dec = decimate_lowpass(&x, 4);
    let interior = &dec[50..850];
    let alias_bin = 500 * interior.len() / 4000;
    let tone_bin = 150 * interior.len() / 4000;
    let ratio = dft_mag(interior, alias_bin) / dft_mag(interior, tone_bin);
    assert!(ratio < 1e-3, "alias leakage {ratio}");
}

#[test]
fn fir_response_oracle() {
    // independent frequency response of the FIR at the passband and stopband
    let h = lowpass_fir(UPSAMPLE_TAPS, 0.125);
    let gain = |f: f64| {
        let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(r, i), (k, c)| {
            let a = 2.0 * PI * f * k as f64;
            (r + c * a.cos(), i - c * a.sin())
        });
        (re * re + im * im).sqrt()
    };
    assert!((gain(0.0) - 1.0).abs() < 1e-12);
    assert!((gain(150.0 / 16000.0) - 1.0).abs() < 1e-3);
    assert!(gain(3500.0 / 16000.0) < 1e-4);
}

#[test]
fn octave_shift_doubles_frequency() {
    let rate = 16000;
    let n = 16000;
    let x = AudioClip::new(sine(400.0, rate, n, 0.5), rate);
    let y = pitch_shift(&x, 12.0).unwrap();
    assert_eq!(y.len(), n);
    let interior = &y.samples[2000..14000];
    let bin_hz = rate as f64 / interior.len() as f64;
    let peak = (1..interior.len() / 2)
        .map(|k| (k, dft_mag(interior, k)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0 as f64
        * bin_hz;
    assert!((peak - 800.0).abs() <= bin_hz, "peak {peak} Hz");
}

#[test]
fn zero_shift_is_identity() {
    let x = AudioClip::new(sine(300.0, 16000, 8000, 0.5), 16000);
    let y = pitch_shift(&x, 0.0).unwrap();
    assert!(correlation(&x.samples[500..7500], &y.samples[500..7500]) > 0.999);
}

#[test]
fn small_shift_keeps_length_and_correlates() {
    let x = AudioClip::new(sine(300.0, 16000, 8000, 0.5), 16000);
    let y = pitch_shift(&x, 0.5).unwrap();
    assert_eq!(y.len(), x.len());
    assert!(y.is_finite());
}

fn clip_strategy(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emphasis_inverse_is_identity(x in clip_strategy(400), coeff in 0.0f64..0.99) {
        let c = AudioClip::new(x.clone(), 16000);
        let back = de_emphasis(&pre_emphasis(&c, coeff), coeff);
        for (a, b) in back.samples.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_length_is_exact(len in 1usize..5000, dur in 0.001f64..0.5, seed in any::<u64>()) {
        let c = AudioClip::new(vec![0.1; len], 8000);
        let out = crop_or_pad(&c, dur, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.len(), (dur * 8000.0).round() as usize);
    }

    #[test]
    fn snr_accuracy_all_seeds(x in clip_strategy(300), seed in any::<u64>(), snr in -10.0f64..40.0) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let clean = AudioClip::new(x, 16000);
        let noise = NoiseKind::White.generate(clean.len() + 50, 16000, &mut ChaCha8Rng::seed_from_u64(seed));
        let s = mix_at_snr(&clean, &noise, snr, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let xi: Vec<f64> = s.noisy.samples.iter().zip(&s.clean.samples).map(|(a, b)| a - b).collect();
        prop_assert!((snr_db(&s.clean.samples, &xi) - snr).abs() < 1e-6);
        prop_assert!(s.noisy.peak() <= 1.0 && s.clean.peak() <= 1.0);
        prop_assert!(s.noisy.is_finite());
    }

    #[test]
    fn upsample_input_is_four_periodic(x in prop::collection::vec(-1.0f64..1.0, 127..600)) {
        let (input, target) = make_upsample_pair(&AudioClip::new(x.clone(), 16000)).unwrap();
        prop_assert_eq!(input.len(), x.len());
        prop_assert_eq!(target.samples, x);
        for chunk in input.samples.chunks(4) {
            prop_assert!(chunk.iter().all(|&v| v == chunk[0]));
        }
    }

    #[test]
    fn rms_target_is_met(x in clip_strategy(300), target in 0.01f64..0.5) {
        prop_assume!(x.iter().any(|v| *v != 0.0));
        let c = AudioClip::new(x, 16000);
        let y = rms_normalize(&c, target).unwrap();
        prop_assert!((rms(&y.samples) - target).abs() < 1e-6);
        let doubled = c.with_samples(c.samples.iter().map(|v| v * 2.0).collect());
        prop_assert_eq!(rms_normalize(&doubled, target).unwrap().samples, y.samples);
    }

    #[test]
    fn peak_normalised_output_is_bounded(x in prop::collection::vec(-5.0f64..5.0, 1..300)) {
        let y = normalize_peak(&AudioClip::new(x.clone(), 16000));
        prop_assert!(y.peak() <= 1.0);
        for (a, b) in y.samples.iter().zip(&x) {
            prop_assert!(a.signum() == b.signum() || *b == 0.0);
        }
    }

    #[test]
    fn pipelines_are_deterministic(x in clip_strategy(2000), seed in any::<u64>()) {
        let c = AudioClip::new(x, 16000);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cropped = crop_or_pad(&c, 0.05, &mut rng).unwrap();
            let noise = NoiseBank::synthetic().draw(cropped.len(), 16000, &mut rng);
            mix_at_snr(&cropped, &noise, 10.0, &mut rng).ok()
        };
        prop_assert_eq!(run(), run());
    }
}
