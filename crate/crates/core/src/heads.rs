//! Task heads consuming trunk embeddings `[B, C, T]`.
//!
//! Classification heads (tagging, speaker id, speech command) produce
//! logits `[B, num_classes]` and train with softmax cross-entropy.
//! Self-supervised heads produce a waveform prediction `[B, 1, T]`:
//! next-step regresses `x[t+1]` with MSE; denoise and upsample regress the
//! clean / full-rate signal with smooth-L1, delayed by
//! `(receptive_field - 1) / 2` samples so that the causal trunk sees a
//! window centred on the target sample.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ndgrad::{conv_out_len, Array, BatchNormState, Mode, Scalar, Tape, Var};
use crate::nn::{he_uniform, Module};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Tagging,
    SpeakerId,
    SpeechCommand,
    NextStep,
    Denoise,
    Upsample,
}

impl HeadKind {
    pub const ALL: [HeadKind; 6] = [
        HeadKind::Tagging,
        HeadKind::SpeakerId,
        HeadKind::SpeechCommand,
        HeadKind::NextStep,
        HeadKind::Denoise,
        HeadKind::Upsample,
    ];

    pub fn is_classification(self) -> bool {
        matches!(self, HeadKind::Tagging | HeadKind::SpeakerId | HeadKind::SpeechCommand)
    }

    pub fn is_self_supervised(self) -> bool {
        !self.is_classification()
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Tagging => "tagging",
            HeadKind::SpeakerId => "speaker_id",
            HeadKind::SpeechCommand => "speech_command",
            HeadKind::NextStep => "next_step",
            HeadKind::Denoise => "denoise",
            HeadKind::Upsample => "upsample",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            HeadKind::Tagging => 5.37e-5,
            HeadKind::SpeakerId | HeadKind::SpeechCommand => 1e-4,
            HeadKind::NextStep | HeadKind::Denoise | HeadKind::Upsample => 5e-3,
        }
    }
}

/// Architecture of one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Output classes (classification heads only).
    pub num_classes: usize,
    /// Hidden width: dense units for tagging/speaker, filters for regression heads.
    pub hidden_units: usize,
    pub dropout: f64,
    pub conv_widths: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub conv_channels: usize,
    /// Convolution width of the regression heads.
    pub filter_width: usize,
    /// Next-step only: drop the first `receptive_field - 1` frames from the loss.
    pub warmup_mask: bool,
}

impl HeadSpec {
    pub fn new(kind: HeadKind) -> Self {
        let (num_classes, hidden_units, filter_width) = match kind {
            HeadKind::Tagging => (41, 512, 1),
            HeadKind::SpeakerId => (1251, 1024, 1),
            HeadKind::SpeechCommand => (12, 0, 1),
            HeadKind::NextStep => (0, 128, 1),
            HeadKind::Denoise | HeadKind::Upsample => (0, 128, 11),
        };
        HeadSpec {
            kind,
            num_classes,
            hidden_units,
            dropout: 0.5,
            conv_widths: vec![100, 50, 25],
            conv_strides: vec![16, 8, 4],
            conv_channels: 64,
            filter_width,
            warmup_mask: false,
        }
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn with_hidden(mut self, n: usize) -> Self {
        self.hidden_units = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must be in [0, 1), got {}", self.dropout);
        if self.kind.is_classification() {
            ensure!(self.num_classes >= 1, "{} head needs num_classes >= 1", self.kind.name());
        }
        match self.kind {
            HeadKind::SpeechCommand => {
                ensure!(!self.conv_widths.is_empty(), "speech command head needs at least one conv layer");
                ensure!(
                    self.conv_widths.len() == self.conv_strides.len(),
                    "conv_widths and conv_strides lengths differ"
                );
                ensure!(self.conv_widths.iter().chain(&self.conv_strides).all(|&v| v >= 1), "conv widths and strides must be >= 1");
                ensure!(self.conv_channels >= 1, "conv_channels must be >= 1");
            }
            HeadKind::Tagging | HeadKind::SpeakerId => ensure!(self.hidden_units >= 1, "hidden_units must be >= 1"),
            _ => {
                ensure!(self.hidden_units >= 1, "hidden_units must be >= 1");
                ensure!(self.filter_width >= 1, "filter_width must be >= 1");
            }
        }
        Ok(())
    }

    /// Shortest input the speech-command conv stack accepts.
    pub fn min_frames(&self) -> usize {
        match self.kind {
            HeadKind::SpeechCommand => {
                let mut need = 1;
                for (w, s) in self.conv_widths.iter().zip(&self.conv_strides).rev() {
                    need = (need - 1) * s + w;
                }
                need
            }
            HeadKind::NextStep => 2,
            _ => 1,
        }
    }
}

/// Regression target delay of the denoise and upsample heads.
pub fn centre_delay(receptive_field: usize) -> usize {
    (receptive_field - 1) / 2
}

/// Prediction frames scored by the next-step loss; `pred[t]` targets `x[t+1]`.
pub fn next_step_frames(t: usize, receptive_field: usize, warmup_mask: bool) -> Result<Range<usize>> {
    ensure!(t >= 2, "next-step prediction needs T >= 2, got {t}");
    let start = if warmup_mask { receptive_field - 1 } else { 0 };
    ensure!(start < t - 1, "warm-up mask of {start} frames leaves nothing to score for T={t}");
    Ok(start..t - 1)
}

/// Prediction frames scored by the denoise/upsample loss; `pred[t]` targets `clean[t - delay]`.
pub fn delayed_frames(t: usize, receptive_field: usize) -> Result<Range<usize>> {
    let delay = centre_delay(receptive_field);
    ensure!(t > delay, "sequence of {t} frames is too short for target delay {delay}");
    Ok(delay..t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer<F> {
    pub gamma: Array<F>,
    pub beta: Array<F>,
    pub state: BatchNormState<F>,
}

impl<F: Scalar> BnLayer<F> {
    fn new(ch: usize) -> Self {
        BnLayer { gamma: Array::full(&[ch], F::one()), beta: Array::zeros(&[ch]), state: BatchNormState::new(ch) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F> {
    pub w: Array<F>,
    pub b: Array<F>,
}

impl<F: Scalar> Dense<F> {
    fn init<R: Rng + ?Sized>(fan_in: usize, units: usize, rng: &mut R) -> Self {
        Dense { w: he_uniform(&[fan_in, units], fan_in, rng), b: Array::zeros(&[units]) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<F> {
    pub w: Array<F>,
    pub b: Array<F>,
}

impl<F: Scalar> Conv<F> {
    fn init<R: Rng + ?Sized>(c_out: usize, c_in: usize, width: usize, rng: &mut R) -> Self {
        Conv { w: he_uniform(&[c_out, c_in, width], c_in * width, rng), b: Array::zeros(&[c_out]) }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Net<F> {
    /// pool → dense → ReLU → dense
    Tagging { hidden: Dense<F>, out: Dense<F> },
    /// pool → [dense → BN → ReLU] × 2 → dense
    Speaker { l1: Dense<F>, bn1: BnLayer<F>, l2: Dense<F>, bn2: BnLayer<F>, out: Dense<F> },
    /// [strided conv → BN → dropout → ReLU] × n → pool → dense
    SpeechCommand { convs: Vec<(Conv<F>, BnLayer<F>)>, out: Dense<F> },
    /// causal conv → ReLU → causal conv
    Regression { c1: Conv<F>, c2: Conv<F> },
}

/// A task head: architecture spec plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<F> {
    spec: HeadSpec,
    in_channels: usize,
    net: Net<F>,
}

/// Target of one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Target<F> {
    Labels(Vec<usize>),
    /// `[B, 1, T]` waveform the head regresses against.
    Signal(Array<F>),
}

pub struct HeadOutput {
    pub output: Var,
    pub params: Vec<Var>,
}

impl<F: Scalar> Head<F> {
    pub fn new<R: Rng + ?Sized>(spec: HeadSpec, in_channels: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        ensure!(in_channels >= 1, "head needs at least one input channel");
        let net = match spec.kind {
            HeadKind::Tagging => Net::Tagging {
                hidden: Dense::init(in_channels, spec.hidden_units, rng),
                out: Dense::init(spec.hidden_units, spec.num_classes, rng),
            },
            HeadKind::SpeakerId => {
                let h = spec.hidden_units;
                Net::Speaker {
                    l1: Dense::init(in_channels, h, rng),
                    bn1: BnLayer::new(h),
                    l2: Dense::init(h, h, rng),
                    bn2: BnLayer::new(h),
                    out: Dense::init(h, spec.num_classes, rng),
                }
            }
            HeadKind::SpeechCommand => {
                let ch = spec.conv_channels;
                let mut c_in = in_channels;
                let mut convs = Vec::new();
                for &w in &spec.conv_widths {
                    convs.push((Conv::init(ch, c_in, w, rng), BnLayer::new(ch)));
                    c_in = ch;
                }
                Net::SpeechCommand { convs, out: Dense::init(ch, spec.num_classes, rng) }
            }
            HeadKind::NextStep | HeadKind::Denoise | HeadKind::Upsample => Net::Regression {
                c1: Conv::init(spec.hidden_units, in_channels, spec.filter_width, rng),
                c2: Conv::init(1, spec.hidden_units, spec.filter_width, rng),
            },
        };
        Ok(Head { spec, in_channels, net })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn kind(&self) -> HeadKind {
        self.spec.kind
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Closed-form parameter count implied by the spec.
    pub fn expected_param_count(spec: &HeadSpec, c: usize) -> usize {
        let k = spec.num_classes;
        match spec.kind {
            HeadKind::Tagging => {
                let h = spec.hidden_units;
                c * h + h + h * k + k
            }
            HeadKind::SpeakerId => {
                let h = spec.hidden_units;
                (c * h + h + 2 * h) + (h * h + h + 2 * h) + (h * k + k)
            }
            HeadKind::SpeechCommand => {
                let ch = spec.conv_channels;
                let mut total = 0;
                let mut c_in = c;
                for &w in &spec.conv_widths {
                    total += ch * c_in * w + ch + 2 * ch;
                    c_in = ch;
                }
                total + ch * k + k
            }
            _ => {
                let (f, w) = (spec.hidden_units, spec.filter_width);
                f * c * w + f + f * w + 1
            }
        }
    }

    /// Sets the final classification layer to zero so logits start at zero.
    pub fn zero_output_layer(&mut self) {
        match &mut self.net {
            Net::Tagging { out, .. } | Net::Speaker { out, .. } | Net::SpeechCommand { out, .. } => {
                out.w.data_mut().iter_mut().for_each(|v| *v = F::zero());
                out.b.data_mut().iter_mut().for_each(|v| *v = F::zero());
            }
            Net::Regression { c2, .. } => {
                c2.w.data_mut().iter_mut().for_each(|v| *v = F::zero());
                c2.b.data_mut().iter_mut().for_each(|v| *v = F::zero());
            }
        }
    }

    /// Runs the head on `emb: [B, C, T]`; parameters are recorded on the tape.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<F>,
        emb: Var,
        mode: Mode,
        trainable: bool,
        rng: &mut R,
    ) -> Result<HeadOutput> {
        let params = self.bind(tape, trainable);
        let output = self.forward_with(tape, emb, &params, mode, rng)?;
        Ok(HeadOutput { output, params })
    }

    /// As [`Head::forward`], with parameter vars already on the tape in
    /// [`Module::params`] order. Batch-norm running stats still live here.
    pub fn forward_with<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<F>,
        emb: Var,
        p: &[Var],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        ensure!(
            p.len() == self.params().len(),
            "{} head takes {} parameter vars, got {}",
            self.spec.kind.name(),
            self.params().len(),
            p.len()
        );
        let es = tape.shape(emb).to_vec();
        ensure!(es.len() == 3, "head input must be [B, C, T], got {es:?}");
        ensure!(
            es[1] == self.in_channels,
            "{} head expects {} channels, embedding has {}",
            self.spec.kind.name(),
            self.in_channels,
            es[1]
        );
        let min = self.spec.min_frames();
        if es[2] < min {
            return Err(Error::invalid(format!(
                "{} head needs at least {min} frames, got {}",
                self.spec.kind.name(),
                es[2]
            )));
        }
        let dropout = self.spec.dropout;
        let output = match &mut self.net {
            Net::Tagging { .. } => {
                let pooled = tape.avg_pool_time(emb)?;
                let h = tape.dense(pooled, p[0], p[1])?;
                let h = tape.relu(h);
                tape.dense(h, p[2], p[3])?
            }
            Net::Speaker { bn1, bn2, .. } => {
                let pooled = tape.avg_pool_time(emb)?;
                let h = tape.dense(pooled, p[0], p[1])?;
                let h = tape.batch_norm(h, p[2], p[3], &mut bn1.state, mode)?;
                let h = tape.relu(h);
                let h = tape.dense(h, p[4], p[5])?;
                let h = tape.batch_norm(h, p[6], p[7], &mut bn2.state, mode)?;
                let h = tape.relu(h);
                tape.dense(h, p[8], p[9])?
            }
            Net::SpeechCommand { convs, .. } => {
                let mut h = emb;
                for (i, (_, bn)) in convs.iter_mut().enumerate() {
                    let v = &p[4 * i..4 * i + 4];
                    h = tape.strided_conv1d(h, v[0], v[1], self.spec.conv_strides[i])?;
                    h = tape.batch_norm(h, v[2], v[3], &mut bn.state, mode)?;
                    h = tape.dropout(h, dropout, mode, rng)?;
                    h = tape.relu(h);
                }
                let pooled = tape.avg_pool_time(h)?;
                let n = p.len();
                tape.dense(pooled, p[n - 2], p[n - 1])?
            }
            Net::Regression { .. } => {
                let h = tape.causal_conv1d(emb, p[0], p[1], 1)?;
                let h = tape.relu(h);
                tape.causal_conv1d(h, p[2], p[3], 1)?
            }
        };
        Ok(output)
    }

    /// Task loss of `output` (from [`Head::forward`]) against `target`.
    ///
    /// `input` is the trunk input `[B, 1, T]`; the next-step head derives
    /// its target from it.
    pub fn loss(
        &self,
        tape: &mut Tape<F>,
        output: Var,
        input: &Array<F>,
        target: &Target<F>,
        receptive_field: usize,
    ) -> Result<Var> {
        match (self.spec.kind, target) {
            (k, Target::Labels(labels)) if k.is_classification() => tape.softmax_cross_entropy(output, labels),
            (HeadKind::NextStep, _) => {
                let t = input.dim(2);
                let frames = next_step_frames(t, receptive_field, self.spec.warmup_mask)?;
                let target = shifted_window(input, frames.start + 1, frames.len())?;
                let pred = tape.slice_time(output, frames.start, frames.len())?;
                let tv = tape.constant(target);
                tape.mse_loss(pred, tv)
            }
            (HeadKind::Denoise | HeadKind::Upsample, Target::Signal(clean)) => {
                ensure!(
                    clean.shape() == tape.shape(output),
                    "regression target {:?} does not match prediction {:?}",
                    clean.shape(),
                    tape.shape(output)
                );
                let frames = delayed_frames(clean.dim(2), receptive_field)?;
                let target = shifted_window(clean, 0, frames.len())?;
                let pred = tape.slice_time(output, frames.start, frames.len())?;
                let tv = tape.constant(target);
                tape.smooth_l1_loss(pred, tv)
            }
            (k, _) => Err(Error::invalid(format!("target kind does not fit a {} head", k.name()))),
        }
    }
}

/// Frames `start..start+len` of every row of a `[B, C, T]` array.
pub fn shifted_window<F: Scalar>(x: &Array<F>, start: usize, len: usize) -> Result<Array<F>> {
    ensure!(x.ndim() == 3, "expected [B, C, T], got {:?}", x.shape());
    let t = x.dim(2);
    ensure!(start + len <= t && len >= 1, "window {start}..{} out of range for T={t}", start + len);
    let mut data = Vec::with_capacity(x.dim(0) * x.dim(1) * len);
    for row in x.data().chunks_exact(t) {
        data.extend_from_slice(&row[start..start + len]);
    }
    Array::new(vec![x.dim(0), x.dim(1), len], data)
}

/// Frame counts after each layer of the speech-command conv stack.
pub fn conv_stack_frames(t: usize, widths: &[usize], strides: &[usize]) -> Option<Vec<usize>> {
    let mut out = Vec::with_capacity(widths.len());
    let mut cur = t;
    for (&w, &s) in widths.iter().zip(strides) {
        cur = conv_out_len(cur, w, s)?;
        out.push(cur);
    }
    Some(out)
}

impl<F: Scalar> Module<F> for Head<F> {
    fn params(&self) -> Vec<(String, &Array<F>)> {
        match &self.net {
            Net::Tagging { hidden, out } => vec![
                ("hidden.weight".into(), &hidden.w),
                ("hidden.bias".into(), &hidden.b),
                ("out.weight".into(), &out.w),
                ("out.bias".into(), &out.b),
            ],
            Net::Speaker { l1, bn1, l2, bn2, out } => vec![
                ("l1.weight".into(), &l1.w),
                ("l1.bias".into(), &l1.b),
                ("bn1.gamma".into(), &bn1.gamma),
                ("bn1.beta".into(), &bn1.beta),
                ("l2.weight".into(), &l2.w),
                ("l2.bias".into(), &l2.b),
                ("bn2.gamma".into(), &bn2.gamma),
                ("bn2.beta".into(), &bn2.beta),
                ("out.weight".into(), &out.w),
                ("out.bias".into(), &out.b),
            ],
            Net::SpeechCommand { convs, out } => {
                let mut v: Vec<(String, &Array<F>)> = Vec::new();
                for (i, (c, bn)) in convs.iter().enumerate() {
                    v.push((format!("conv{i}.weight"), &c.w));
                    v.push((format!("conv{i}.bias"), &c.b));
                    v.push((format!("bn{i}.gamma"), &bn.gamma));
                    v.push((format!("bn{i}.beta"), &bn.beta));
                }
                v.push(("out.weight".into(), &out.w));
                v.push(("out.bias".into(), &out.b));
                v
            }
            Net::Regression { c1, c2 } => vec![
                ("conv1.weight".into(), &c1.w),
                ("conv1.bias".into(), &c1.b),
                ("conv2.weight".into(), &c2.w),
                ("conv2.bias".into(), &c2.b),
            ],
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array<F>)> {
        match &mut self.net {
            Net::Tagging { hidden, out } => vec![
                ("hidden.weight".into(), &mut hidden.w),
                ("hidden.bias".into(), &mut hidden.b),
                ("out.weight".into(), &mut out.w),
                ("out.bias".into(), &mut out.b),
            ],
            Net::Speaker { l1, bn1, l2, bn2, out } => vec![
                ("l1.weight".into(), &mut l1.w),
                ("l1.bias".into(), &mut l1.b),
                ("bn1.gamma".into(), &mut bn1.gamma),
                ("bn1.beta".into(), &mut bn1.beta),
                ("l2.weight".into(), &mut l2.w),
                ("l2.bias".into(), &mut l2.b),
                ("bn2.gamma".into(), &mut bn2.gamma),
                ("bn2.beta".into(), &mut bn2.beta),
                ("out.weight".into(), &mut out.w),
                ("out.bias".into(), &mut out.b),
            ],
            Net::SpeechCommand { convs, out } => {
                let mut v: Vec<(String, &mut Array<F>)> = Vec::new();
                for (i, (c, bn)) in convs.iter_mut().enumerate() {
                    v.push((format!("conv{i}.weight"), &mut c.w));
                    v.push((format!("conv{i}.bias"), &mut c.b));
                    v.push((format!("bn{i}.gamma"), &mut bn.gamma));
                    v.push((format!("bn{i}.beta"), &mut bn.beta));
                }
                v.push(("out.weight".into(), &mut out.w));
                v.push(("out.bias".into(), &mut out.b));
                v
            }
            Net::Regression { c1, c2 } => vec![
                ("conv1.weight".into(), &mut c1.w),
                ("conv1.bias".into(), &mut c1.b),
                ("conv2.weight".into(), &mut c2.w),
                ("conv2.bias".into(), &mut c2.b),
            ],
        }
    }

    fn buffers(&self) -> Vec<(String, &Array<F>)> {
        self.bn_layers().into_iter().flat_map(|(name, bn)| {
            [
                (format!("{name}.running_mean"), &bn.state.running_mean),
                (format!("{name}.running_var"), &bn.state.running_var),
            ]
        })
        .collect()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Array<F>)> {
        let layers: Vec<(String, &mut BnLayer<F>)> = match &mut self.net {
            Net::Speaker { bn1, bn2, .. } => vec![("bn1".into(), bn1), ("bn2".into(), bn2)],
            Net::SpeechCommand { convs, .. } => {
                convs.iter_mut().enumerate().map(|(i, (_, bn))| (format!("bn{i}"), bn)).collect()
            }
            _ => Vec::new(),
        };
        layers
            .into_iter()
            .flat_map(|(name, bn)| {
                let BatchNormState { running_mean, running_var, .. } = &mut bn.state;
                [(format!("{name}.running_mean"), running_mean), (format!("{name}.running_var"), running_var)]
            })
            .collect()
    }
}

impl<F: Scalar> Head<F> {
    fn bn_layers(&self) -> Vec<(String, &BnLayer<F>)> {
        match &self.net {
            Net::Speaker { bn1, bn2, .. } => vec![("bn1".into(), bn1), ("bn2".into(), bn2)],
            Net::SpeechCommand { convs, .. } => convs.iter().enumerate().map(|(i, (_, bn))| (format!("bn{i}"), bn)).collect(),
            _ => Vec::new(),
        }
    }
}
