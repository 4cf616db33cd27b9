//! Synthetic labelled and unlabelled corpora. Class `k` of `K` owns the
//! `k`-th of `K` geometric frequency bands between `low_hz` and
//! `high_hz`; each clip is a tone, a chirp or an amplitude-modulated tone
//! cluster inside that band, over white background noise.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audiopipe::{save_wav, AudioClip, SampleFormat};
use crate::error::{ensure, Error, Result};
use crate::train::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub clips_per_class: usize,
    /// Extra clips per class marked `split=test`.
    pub test_per_class: usize,
    pub unlabeled_clips: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    /// Clip-to-background SNR.
    pub snr_db: f64,
    pub low_hz: f64,
    pub high_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            clips_per_class: 8,
            test_per_class: 0,
            unlabeled_clips: 32,
            clip_seconds: 2.0,
            sample_rate: 16_000,
            snr_db: 30.0,
            low_hz: 100.0,
            high_hz: 4000.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Tone,
    Chirp,
    AmCluster,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.classes >= 1, "need at least one class");
        ensure!(self.clip_seconds > 0.0 && self.clip_seconds.is_finite(), "clip_seconds must be positive");
        ensure!(self.sample_rate >= 1000, "sample rate must be at least 1000 Hz");
        ensure!(
            self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < self.sample_rate as f64 / 2.0,
            "need 0 < low_hz < high_hz < Nyquist, got {}..{}",
            self.low_hz,
            self.high_hz
        );
        ensure!(self.snr_db.is_finite(), "snr_db must be finite");
        Ok(())
    }

    /// `[lo, hi)` band of class `k`.
    pub fn band(&self, k: usize) -> (f64, f64) {
        let r = self.high_hz / self.low_hz;
        let edge = |i: usize| self.low_hz * r.powf(i as f64 / self.classes as f64);
        (edge(k), edge(k + 1))
    }

    fn len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    /// Clip `index` of class `k`; `salt` separates labelled and
    /// unlabelled draws.
    pub fn clip(&self, k: usize, index: usize, salt: u64) -> (AudioClip, Shape) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, salt, k as u64, index as u64]));
        let (lo, hi) = self.band(k);
        // stay inside the middle 80% (log scale) of the band
        let inner = |u: f64| lo * (hi / lo).powf(0.1 + 0.8 * u);
        let rate = self.sample_rate as f64;
        let n = self.len();
        let shape = [Shape::Tone, Shape::Chirp, Shape::AmCluster][index % 3];
        let mut x: Vec<f64> = match shape {
            Shape::Tone => {
                let f = inner(rng.gen());
                let p = rng.gen_range(0.0..2.0 * PI);
                (0..n).map(|i| (2.0 * PI * f * i as f64 / rate + p).sin()).collect()
            }
            Shape::Chirp => {
                let (f0, f1) = (inner(rng.gen()), inner(rng.gen()));
                let dur = n as f64 / rate;
                (0..n)
                    .map(|i| {
                        let t = i as f64 / rate;
                        (2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).sin()
                    })
                    .collect()
            }
            Shape::AmCluster => {
                let tones: Vec<(f64, f64)> = (0..3).map(|_| (inner(rng.gen()), rng.gen_range(0.0..2.0 * PI))).collect();
                let (fm, pm) = (rng.gen_range(2.0..8.0), rng.gen_range(0.0..2.0 * PI));
                (0..n)
                    .map(|i| {
                        let t = i as f64 / rate;
                        let env = 0.6 + 0.4 * (2.0 * PI * fm * t + pm).sin();
                        env * tones.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>() / 3.0
                    })
                    .collect()
            }
        };
        let p_sig = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let sigma = (p_sig / 10f64.powf(self.snr_db / 10.0)).sqrt();
        for v in &mut x {
            let w: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * w;
        }
        let amp = rng.gen_range(0.3..0.9);
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        x.iter_mut().for_each(|v| *v *= amp / peak);
        (AudioClip::new(x, self.sample_rate).with_label(k), shape)
    }

    pub fn class_name(&self, k: usize) -> String {
        let width = (self.classes.max(2) - 1).to_string().len();
        format!("c{k:0width$}")
    }
}

/// Paths written by [`write_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train_manifest: PathBuf,
    pub unlabeled_manifest: PathBuf,
    pub files: usize,
}

const SALT_LABELED: u64 = 11;
const SALT_UNLABELED: u64 = 12;

/// Writes `train.csv` (`path,label,split`), `unlabeled.csv` (`path`) and
/// 16-bit WAVs under `dir`.
pub fn write_corpus(cfg: &SynthConfig, dir: &Path) -> Result<Corpus> {
    cfg.validate()?;
    for sub in ["labeled", "unlabeled"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut files = 0;
    let mut train = String::from("path,label,split\n");
    for k in 0..cfg.classes {
        for i in 0..cfg.clips_per_class + cfg.test_per_class {
            let (clip, _) = cfg.clip(k, i, SALT_LABELED);
            let rel = format!("labeled/{}_{i:03}.wav", cfg.class_name(k));
            save_wav(dir.join(&rel), &clip, SampleFormat::Pcm16)?;
            let split = if i < cfg.clips_per_class { "train" } else { "test" };
            train.push_str(&format!("{rel},{},{split}\n", cfg.class_name(k)));
            files += 1;
        }
    }
    let mut unlabeled = String::from("path\n");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, SALT_UNLABELED]));
    for i in 0..cfg.unlabeled_clips {
        let k = rng.gen_range(0..cfg.classes);
        let (clip, _) = cfg.clip(k, i, SALT_UNLABELED);
        let rel = format!("unlabeled/u_{i:04}.wav");
        save_wav(dir.join(&rel), &clip, SampleFormat::Pcm16)?;
        unlabeled.push_str(&rel);
        unlabeled.push('\n');
        files += 1;
    }
    let train_manifest = dir.join("train.csv");
    let unlabeled_manifest = dir.join("unlabeled.csv");
    fs::write(&train_manifest, train).map_err(|e| Error::io(&train_manifest, e))?;
    fs::write(&unlabeled_manifest, unlabeled).map_err(|e| Error::io(&unlabeled_manifest, e))?;
    Ok(Corpus { train_manifest, unlabeled_manifest, files })
}
