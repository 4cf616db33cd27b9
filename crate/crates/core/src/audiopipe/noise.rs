//! Background-noise sources: WAV files from a directory or built-in
//! generators.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{load_wav, resample, AudioClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    /// Pink noise under a few slow random amplitude envelopes, a crude
    /// stand-in for crowd babble.
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        }
    }

    /// `len` samples at `rate`, peak-normalised to 0.5.
    pub fn generate<R: Rng + ?Sized>(self, len: usize, rate: u32, rng: &mut R) -> AudioClip {
        let mut x: Vec<f64> = match self {
            NoiseKind::White => (0..len).map(|_| StandardNormal.sample(rng)).collect(),
            NoiseKind::Pink => pink(len, rng),
            NoiseKind::Babble => {
                let base = pink(len, rng);
                let voices: Vec<(f64, f64)> =
                    (0..4).map(|_| (rng.gen_range(2.0..6.0), rng.gen_range(0.0..2.0 * PI))).collect();
                base.iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let t = i as f64 / rate as f64;
                        let env: f64 = voices.iter().map(|(f, p)| 0.5 + 0.5 * (2.0 * PI * f * t + p).sin()).sum();
                        v * env
                    })
                    .collect()
            }
        };
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            x.iter_mut().for_each(|v| *v *= 0.5 / peak);
        }
        AudioClip::new(x, rate).with_source(self.name())
    }
}

/// Paul Kellet's economy pink filter over white noise.
fn pink<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

/// Pool of noise recordings; empty means "use the generators".
#[derive(Debug, Clone, Default)]
pub struct NoiseBank {
    clips: Vec<AudioClip>,
}

impl NoiseBank {
    pub fn synthetic() -> Self {
        Self::default()
    }

    /// Loads every `.wav` under `dir` (sorted by name), resampled to `rate`.
    pub fn from_dir(dir: impl AsRef<Path>, rate: u32) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        let mut clips = Vec::with_capacity(paths.len());
        for p in paths {
            let c = load_wav(&p)?;
            let c = if c.sample_rate == rate { c } else { resample(&c, rate)? };
            if c.peak() > 0.0 {
                clips.push(c);
            }
        }
        if clips.is_empty() {
            return Err(Error::Data(format!("no non-silent WAV files in {}", dir.display())));
        }
        Ok(Self { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// A noise clip of at least `len` samples; recordings are tiled.
    pub fn draw<R: Rng + ?Sized>(&self, len: usize, rate: u32, rng: &mut R) -> AudioClip {
        if self.clips.is_empty() {
            let kind = NoiseKind::ALL[rng.gen_range(0..NoiseKind::ALL.len())];
            return kind.generate(len, rate, rng);
        }
        let src = &self.clips[rng.gen_range(0..self.clips.len())];
        if src.len() >= len {
            return src.clone();
        }
        let samples = src.samples.iter().cycle().take(len).copied().collect();
        src.with_samples(samples)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn generators_are_bounded_and_tagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in NoiseKind::ALL {
            let c = kind.generate(4000, 16000, &mut rng);
            assert_eq!(c.len(), 4000);
            assert!((c.peak() - 0.5).abs() < 1e-12);
            assert_eq!(c.source_id, kind.name());
        }
    }

    #[test]
    fn pink_has_more_low_frequency_energy() {
        let x = pink(1 << 14, &mut ChaCha8Rng::seed_from_u64(4));
        // first differences act as a high-pass
        let diff: f64 = x.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
        let total: f64 = x.iter().map(|v| v * v).sum();
        assert!(diff < 0.5 * total, "{diff} vs {total}");
    }
}
