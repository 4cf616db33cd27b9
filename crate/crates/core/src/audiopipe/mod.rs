//! Waveform ingestion, preprocessing, self-supervised target synthesis and
//! augmentation. Samples are `f64` throughout; the trainer casts at the
//! batch boundary.

mod manifest;
mod noise;
mod pitch;
mod resample;
mod transforms;
mod wav;

pub use manifest::{Manifest, ManifestRow};
pub use noise::{NoiseBank, NoiseKind};
pub use pitch::{pitch_shift, MAX_SEMITONES};
pub use resample::{resample, resample_samples, TAPS_PER_PHASE};
pub use transforms::{
    crop_or_pad, de_emphasis, decimate_lowpass, lowpass_fir, make_upsample_pair, mix_at_snr, next_step_pair,
    normalize_peak, pre_emphasis, rms, rms_normalize, snr_db, UPSAMPLE_FACTOR, UPSAMPLE_TAPS,
};
pub use wav::{load_wav, read_wav, save_wav, write_wav, SampleFormat};

pub const CANONICAL_RATE: u32 = 16_000;

/// Mono waveform with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: Option<usize>,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate, label: None, source_id: String::new() }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    /// Same metadata, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self { samples, sample_rate: self.sample_rate, label: self.label, source_id: self.source_id.clone() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|x| x.is_finite())
    }
}

/// A clean clip and its noise-corrupted version.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub clean: AudioClip,
    pub noisy: AudioClip,
    pub snr_db: f64,
    pub noise_kind: String,
}
