//! Batch assembly. Every random choice for sample `j` of task `i` at
//! `(epoch, step)` comes from its own seed, so batches do not depend on
//! worker count or on where a run was resumed.

use std::path::Path;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audiopipe::{
    crop_or_pad, load_wav, make_upsample_pair, mix_at_snr, normalize_peak, pitch_shift, pre_emphasis, resample,
    rms_normalize, AudioClip, Manifest, NoiseBank, CANONICAL_RATE,
};
use crate::error::{ensure, Error, Result};
use crate::heads::{HeadKind, Target};
use crate::ndgrad::{Array, Scalar};

const TAG_SHUFFLE: u64 = 1;
const TAG_SAMPLE: u64 = 2;
pub(crate) const TAG_DROPOUT: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |h, &p| splitmix(h ^ p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    Peak,
    Rms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub normalize: Normalize,
    pub rms_target: f64,
    pub pre_emphasis: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { normalize: Normalize::Rms, rms_target: 0.1, pre_emphasis: 0.97 }
    }
}

/// Augmentation of supervised training clips; off unless probabilities
/// are set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub pitch_prob: f64,
    /// Semitones; shifts are uniform in `[-pitch_range, pitch_range]`.
    pub pitch_range: f64,
    pub noise_prob: f64,
    pub snr_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { pitch_prob: 0.0, pitch_range: 2.0, noise_prob: 0.0, snr_range: [10.0, 15.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of noise WAVs; built-in generators when absent.
    pub noise_bank: Option<std::path::PathBuf>,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    /// SNR range of the denoising task's corrupted inputs.
    pub denoise_snr: [f64; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            noise_bank: None,
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            denoise_snr: [10.0, 15.0],
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    ensure!(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1], "{name} must be an increasing pair, got {r:?}");
    Ok(())
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocess;
        ensure!((0.0..1.0).contains(&p.pre_emphasis), "pre_emphasis must be in [0, 1), got {}", p.pre_emphasis);
        ensure!(p.rms_target > 0.0 && p.rms_target <= 1.0, "rms_target must be in (0, 1], got {}", p.rms_target);
        let a = &self.augment;
        for (n, v) in [("pitch_prob", a.pitch_prob), ("noise_prob", a.noise_prob)] {
            ensure!((0.0..=1.0).contains(&v), "{n} must be in [0, 1], got {v}");
        }
        ensure!(
            (0.0..=crate::audiopipe::MAX_SEMITONES).contains(&a.pitch_range),
            "pitch_range must be in [0, 12], got {}",
            a.pitch_range
        );
        check_range("snr_range", a.snr_range)?;
        check_range("denoise_snr", self.denoise_snr)
    }
}

/// Data settings plus the loaded noise bank.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: DataConfig,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub noise: NoiseBank,
}

impl Pipeline {
    pub fn new(config: DataConfig, clip_seconds: f64) -> Result<Self> {
        config.validate()?;
        ensure!(clip_seconds.is_finite() && clip_seconds > 0.0, "clip_seconds must be positive, got {clip_seconds}");
        let noise = match &config.noise_bank {
            Some(dir) => NoiseBank::from_dir(dir, CANONICAL_RATE)?,
            None => NoiseBank::synthetic(),
        };
        Ok(Self { config, clip_seconds, sample_rate: CANONICAL_RATE, noise })
    }

    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    fn preprocess(&self, clip: &AudioClip) -> Result<AudioClip> {
        let p = &self.config.preprocess;
        let c = match p.normalize {
            Normalize::Peak => normalize_peak(clip),
            Normalize::Rms => rms_normalize(clip, p.rms_target)?,
        };
        Ok(bound(&pre_emphasis(&c, p.pre_emphasis)))
    }

    fn window(&self, clip: &AudioClip, rng: Option<&mut ChaCha8Rng>) -> Result<AudioClip> {
        match rng {
            Some(rng) => crop_or_pad(clip, self.clip_seconds, rng),
            None => Ok(centre_crop(clip, self.clip_len())),
        }
    }

    /// Input and target for one clip. `rng` is `None` for evaluation,
    /// which takes a centre crop and skips augmentation.
    pub fn example(&self, kind: HeadKind, clip: &AudioClip, mut rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<f64>, Example)> {
        ensure!(
            clip.sample_rate == self.sample_rate,
            "clip {} is at {} Hz, expected {}",
            clip.source_id,
            clip.sample_rate,
            self.sample_rate
        );
        let c = self.window(clip, rng.as_deref_mut())?;
        match kind {
            HeadKind::Tagging | HeadKind::SpeakerId | HeadKind::SpeechCommand => {
                let label = clip
                    .label
                    .ok_or_else(|| Error::Data(format!("clip {} has no label", clip.source_id)))?;
                let mut c = c;
                if let Some(rng) = rng {
                    c = self.augment(&c, rng)?;
                }
                Ok((self.preprocess(&c)?.samples, Example::Label(label)))
            }
            HeadKind::NextStep => Ok((self.preprocess(&c)?.samples, Example::SelfTarget)),
            HeadKind::Denoise => {
                let clean = self.preprocess(&c)?;
                if clean.peak() == 0.0 {
                    // silence stays silence; nothing to remove
                    return Ok((clean.samples.clone(), Example::Signal(clean.samples)));
                }
                let mut fallback = ChaCha8Rng::seed_from_u64(derive_seed(&[clip.len() as u64]));
                let rng = rng.unwrap_or(&mut fallback);
                let [lo, hi] = self.config.denoise_snr;
                let snr = if lo < hi { rng.gen_range(lo..hi) } else { lo };
                let noise = self.noise.draw(clean.len(), self.sample_rate, rng);
                let mixed = mix_at_snr(&clean, &noise, snr, rng)?;
                Ok((mixed.noisy.samples, Example::Signal(mixed.clean.samples)))
            }
            HeadKind::Upsample => {
                let full = self.preprocess(&c)?;
                let (low, target) = make_upsample_pair(&full)?;
                let g = 1.0 / low.peak().max(1.0);
                let scale = |v: Vec<f64>| v.into_iter().map(|x| x * g).collect();
                Ok((scale(low.samples), Example::Signal(scale(target.samples))))
            }
        }
    }

    fn augment(&self, clip: &AudioClip, rng: &mut ChaCha8Rng) -> Result<AudioClip> {
        let a = &self.config.augment;
        let mut c = clip.clone();
        if a.pitch_prob > 0.0 && rng.gen_bool(a.pitch_prob) {
            let s = if a.pitch_range > 0.0 { rng.gen_range(-a.pitch_range..=a.pitch_range) } else { 0.0 };
            c = pitch_shift(&c, s)?;
        }
        if a.noise_prob > 0.0 && rng.gen_bool(a.noise_prob) && c.peak() > 0.0 {
            let [lo, hi] = a.snr_range;
            let snr = if lo < hi { rng.gen_range(lo..hi) } else { lo };
            let noise = self.noise.draw(c.len(), self.sample_rate, rng);
            c = mix_at_snr(&c, &noise, snr, rng)?.noisy;
        }
        Ok(c)
    }
}

fn bound(clip: &AudioClip) -> AudioClip {
    let peak = clip.peak();
    if peak > 1.0 {
        clip.with_samples(clip.samples.iter().map(|x| x / peak).collect())
    } else {
        clip.clone()
    }
}

/// Middle `len` samples, or right zero-padding.
pub fn centre_crop(clip: &AudioClip, len: usize) -> AudioClip {
    if clip.len() > len {
        let start = (clip.len() - len) / 2;
        clip.with_samples(clip.samples[start..start + len].to_vec())
    } else {
        let mut s = clip.samples.clone();
        s.resize(len, 0.0);
        clip.with_samples(s)
    }
}

/// Target part of a prepared example.
#[derive(Clone, Debug, PartialEq)]
pub enum Example {
    Label(usize),
    /// The input is its own target (next-step prediction).
    SelfTarget,
    Signal(Vec<f64>),
}

/// One task's mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch<F> {
    /// `[B, 1, T]`
    pub input: Array<F>,
    pub target: Target<F>,
}

impl<F: Scalar> TaskBatch<F> {
    pub fn len(&self) -> usize {
        self.input.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks prepared examples; all must share one length.
    pub fn from_examples(examples: Vec<(Vec<f64>, Example)>) -> Result<Self> {
        ensure!(!examples.is_empty(), "empty batch");
        let t = examples[0].0.len();
        let b = examples.len();
        ensure!(examples.iter().all(|(x, _)| x.len() == t), "examples in a batch differ in length");
        let mut input = Vec::with_capacity(b * t);
        let mut labels = Vec::new();
        let mut signal = Vec::new();
        for (x, ex) in &examples {
            input.extend(x.iter().map(|&v| F::of(v)));
            match ex {
                Example::Label(l) => labels.push(*l),
                Example::SelfTarget => signal.extend(x.iter().map(|&v| F::of(v))),
                Example::Signal(s) => {
                    ensure!(s.len() == t, "target length {} differs from input length {t}", s.len());
                    signal.extend(s.iter().map(|&v| F::of(v)));
                }
            }
        }
        let target = if labels.len() == b {
            Target::Labels(labels)
        } else {
            ensure!(labels.is_empty(), "batch mixes labelled and unlabelled examples");
            Target::Signal(Array::new(vec![b, 1, t], signal)?)
        };
        Ok(TaskBatch { input: Array::new(vec![b, 1, t], input)?, target })
    }
}

/// Clips of one task, resampled to the pipeline rate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskData {
    pub clips: Vec<AudioClip>,
    /// Class names, indexed by label.
    pub classes: Vec<String>,
}

impl TaskData {
    pub fn new(clips: Vec<AudioClip>) -> Self {
        Self { clips, classes: Vec::new() }
    }

    /// Loads the rows of `split` (all rows when `None`) from a manifest.
    pub fn from_manifest(path: impl AsRef<Path>, split: Option<&str>, rate: u32) -> Result<Self> {
        let m = Manifest::load(path)?;
        let rows: Vec<_> = match split {
            Some(s) => m.rows.iter().filter(|r| r.split.as_deref() == Some(s)).collect(),
            None => m.rows.iter().collect(),
        };
        let mut clips = Vec::with_capacity(rows.len());
        for r in rows {
            let mut c = load_wav(&r.path).map_err(|e| match e {
                Error::Format { .. } => Error::Data(e.to_string()),
                e => e,
            })?;
            if c.sample_rate != rate {
                c = resample(&c, rate)?;
            }
            c.label = r.label.as_deref().and_then(|l| m.class_index(l));
            clips.push(c);
        }
        Ok(Self { clips, classes: m.classes().to_vec() })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        if self.classes.is_empty() {
            self.clips.iter().filter_map(|c| c.label).max().map_or(0, |m| m + 1)
        } else {
            self.classes.len()
        }
    }
}

/// Shuffled visiting order of every task for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPlan {
    orders: Vec<Vec<usize>>,
    batch_size: usize,
    steps: usize,
}

impl EpochPlan {
    /// `steps = ceil(largest / batch_size)`; smaller datasets cycle.
    pub fn new(sizes: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Self> {
        ensure!(batch_size >= 1, "batch size must be positive");
        for (i, &n) in sizes.iter().enumerate() {
            ensure!(n >= batch_size, "task {i} has {n} clips, fewer than one batch of {batch_size}");
        }
        let orders = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64, i as u64, TAG_SHUFFLE])));
                o
            })
            .collect();
        let largest = sizes.iter().copied().max().unwrap_or(0);
        Ok(Self { orders, batch_size, steps: largest.div_ceil(batch_size) })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn indices(&self, task: usize, step: usize) -> Vec<usize> {
        let o = &self.orders[task];
        (0..self.batch_size).map(|j| o[(step * self.batch_size + j) % o.len()]).collect()
    }
}

/// Everything needed to build the batches of any step of one epoch.
pub struct BatchSource<'a> {
    pub plan: EpochPlan,
    pub kinds: Vec<HeadKind>,
    pub data: &'a [TaskData],
    pub pipeline: &'a Pipeline,
    pub seed: u64,
    pub epoch: usize,
}

impl BatchSource<'_> {
    pub fn batches<F: Scalar>(&self, step: usize) -> Result<Vec<TaskBatch<F>>> {
        self.kinds
            .iter()
            .enumerate()
            .map(|(i, &kind)| {
                let examples = self
                    .plan
                    .indices(i, step)
                    .into_iter()
                    .enumerate()
                    .map(|(j, idx)| {
                        let s = derive_seed(&[self.seed, self.epoch as u64, i as u64, step as u64, j as u64, TAG_SAMPLE]);
                        let mut rng = ChaCha8Rng::seed_from_u64(s);
                        self.pipeline.example(kind, &self.data[i].clips[idx], Some(&mut rng))
                    })
                    .collect::<Result<Vec<_>>>()?;
                TaskBatch::from_examples(examples)
            })
            .collect()
    }
}

/// Runs `make(0..steps)` on `workers` threads and hands results to
/// `consume` in step order. Each worker keeps at most `depth` results
/// queued. `workers == 0` builds inline.
pub fn prefetch<T: Send>(
    steps: usize,
    workers: usize,
    depth: usize,
    make: impl Fn(usize) -> Result<T> + Sync,
    mut consume: impl FnMut(usize, T) -> Result<()>,
) -> Result<()> {
    if workers == 0 {
        for s in 0..steps {
            consume(s, make(s)?)?;
        }
        return Ok(());
    }
    thread::scope(|scope| {
        let mut rxs = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = mpsc::sync_channel(depth.max(1));
            rxs.push(rx);
            let make = &make;
            scope.spawn(move || {
                for s in (w..steps).step_by(workers) {
                    let r = make(s);
                    let failed = r.is_err();
                    if tx.send(r).is_err() || failed {
                        break;
                    }
                }
            });
        }
        let mut result = Ok(());
        for s in 0..steps {
            let item = rxs[s % workers].recv().map_err(|_| Error::Data("batch worker stopped".into())).and_then(|r| r);
            if let Err(e) = item.and_then(|b| consume(s, b)) {
                result = Err(e);
                break;
            }
        }
        drop(rxs);
        result
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_cycles_smaller_datasets() {
        let p = EpochPlan::new(&[10, 4], 4, 7, 0).unwrap();
        assert_eq!(p.steps(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|s| p.indices(0, s)).take(10).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(p.indices(1, 0), p.indices(1, 1));
        assert!(EpochPlan::new(&[3], 4, 0, 0).is_err());
    }

    #[test]
    fn plans_differ_by_epoch_and_repeat_by_seed() {
        let a = EpochPlan::new(&[50], 5, 1, 0).unwrap();
        assert_eq!(a, EpochPlan::new(&[50], 5, 1, 0).unwrap());
        assert_ne!(a, EpochPlan::new(&[50], 5, 1, 1).unwrap());
    }

    #[test]
    fn prefetch_preserves_order() {
        for workers in 0..4 {
            let mut got = Vec::new();
            prefetch(17, workers, 2, |s| Ok(s * s), |s, v| {
                got.push((s, v));
                Ok(())
            })
            .unwrap();
            assert_eq!(got, (0..17).map(|s| (s, s * s)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn prefetch_stops_on_error() {
        let r = prefetch(100, 2, 1, |s| if s == 5 { Err(Error::Data("bad".into())) } else { Ok(s) }, |_, _| Ok(()));
        assert!(matches!(r, Err(Error::Data(_))));
        let r = prefetch(100, 3, 1, Ok, |s, _| if s == 9 { Err(Error::invalid("stop")) } else { Ok(()) });
        assert!(r.is_err());
    }

    #[test]
    fn examples_stay_in_range() {
        let p = Pipeline::new(DataConfig::default(), 0.05).unwrap();
        let clip = AudioClip::new((0..1200).map(|i| (i as f64 * 0.05).sin() * 3.0).collect(), 16000).with_label(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in HeadKind::ALL {
            let (x, ex) = p.example(kind, &clip, Some(&mut rng)).unwrap();
            assert_eq!(x.len(), 800);
            assert!(x.iter().all(|v| v.abs() <= 1.0), "{kind:?}");
            if let Example::Signal(s) = ex {
                assert_eq!(s.len(), 800);
                assert!(s.iter().all(|v| v.abs() <= 1.0));
            }
        }
    }
}
