//! Multitask training: one shared backward pass over `Σ αᵢ ℒᵢ`, then one
//! Adam step per parameter group (trunk, and each head at its own rate).

mod checkpoint;
mod data;
mod model;
mod step;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, OptimRecord, TensorRecord, FORMAT_VERSION, MAGIC};
pub use data::{
    centre_crop, derive_seed, prefetch, AugmentConfig, BatchSource, DataConfig, EpochPlan, Example, Normalize, Pipeline,
    PreprocessConfig, TaskBatch, TaskData,
};
pub use model::{Model, ModelConfig, NamedHead, TRUNK_GROUP};
pub use step::{apply_gradients, compute_gradients, Gradients, MetricAcc, Optimizers, StepContext};

use crate::error::{ensure, Error, Result};
use crate::heads::{HeadKind, HeadSpec, Target};
use crate::ndgrad::{AdamConfig, LrSchedule, Scalar};
use crate::trunk::TrunkConfig;

const TAG_INIT: u64 = 4;

/// One task: its head, loss weight `α` and optimiser.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub head: HeadSpec,
    pub weight: f64,
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
}

impl TaskSpec {
    /// Weight 1 and the head kind's default learning rate.
    pub fn new(name: impl Into<String>, head: HeadSpec) -> Self {
        let lr = head.kind.default_lr();
        Self { name: name.into(), head, weight: 1.0, optimizer: AdamConfig::with_lr(lr), schedule: LrSchedule::default() }
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.weight = w;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.optimizer.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.weight.is_finite() && self.weight >= 0.0, "task `{}` weight must be >= 0, got {}", self.name, self.weight);
        self.head.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()
    }

    pub fn named_head(&self) -> NamedHead {
        NamedHead { name: self.name.clone(), head: self.head.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_seconds: f64,
    pub trunk_lr: f64,
    pub schedule: LrSchedule,
    /// Batch-building threads; 0 builds batches on the training thread.
    pub workers: usize,
    pub freeze_trunk: bool,
    /// Write `epoch_NNNN.wtrk` every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Stop once every classification task's epoch top-1 reaches this.
    pub early_stop_top1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            epochs: 50,
            seed: 0,
            clip_seconds: 2.0,
            trunk_lr: 3e-4,
            schedule: LrSchedule::default(),
            workers: 1,
            freeze_trunk: false,
            checkpoint_every: 0,
            early_stop_top1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch_size must be positive");
        ensure!(self.clip_seconds.is_finite() && self.clip_seconds > 0.0, "clip_seconds must be positive");
        AdamConfig::with_lr(self.trunk_lr).validate()?;
        self.schedule.validate()?;
        if let Some(t) = self.early_stop_top1 {
            ensure!((0.0..=1.0).contains(&t), "early_stop_top1 must be in [0, 1], got {t}");
        }
        Ok(())
    }

    pub fn trunk_optimizer(&self) -> AdamConfig {
        AdamConfig::with_lr(self.trunk_lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task: String,
    pub loss: f64,
    /// Training top-1 for classification, mean absolute error otherwise.
    pub metric: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,task,loss,metric,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.task, self.loss, self.metric, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub losses: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub stopped_early: bool,
}

impl TrainLog {
    /// Per-epoch mean losses of `task`.
    pub fn task_losses(&self, task: &str) -> Vec<f64> {
        self.epochs.iter().filter(|r| r.task == task).map(|r| r.loss).collect()
    }

    pub fn task_metrics(&self, task: &str) -> Vec<f64> {
        self.epochs.iter().filter(|r| r.task == task).map(|r| r.metric).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", EpochRecord::CSV_HEADER);
        for r in &self.epochs {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Where [`Trainer::fit`] writes its log and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOutputs {
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

struct LogWriter {
    out: Option<(PathBuf, BufWriter<File>)>,
}

impl LogWriter {
    fn open(path: Option<&Path>, append: bool) -> Result<Self> {
        let Some(path) = path else { return Ok(Self { out: None }) };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let existing = append && path.exists();
        let file = if existing {
            OpenOptions::new().append(true).open(path)
        } else {
            File::create(path)
        }
        .map_err(|e| Error::io(path, e))?;
        let mut w = Self { out: Some((path.to_path_buf(), BufWriter::new(file))) };
        if !existing {
            w.write_line(EpochRecord::CSV_HEADER)?;
            w.flush()?;
        }
        Ok(w)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        if let Some((p, w)) = &mut self.out {
            writeln!(w, "{line}").map_err(|e| Error::io(&*p, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((p, w)) = &mut self.out {
            w.flush().map_err(|e| Error::io(&*p, e))?;
        }
        Ok(())
    }
}

/// Model, tasks, optimiser state and the epoch counter of a run.
#[derive(Clone, Debug)]
pub struct Trainer<F> {
    pub model: Model<F>,
    tasks: Vec<TaskSpec>,
    config: TrainConfig,
    optims: Optimizers<F>,
    epoch: usize,
    snapshot: serde_json::Value,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Model<F>, tasks: Vec<TaskSpec>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        ensure!(!tasks.is_empty(), "at least one task is required");
        for t in &tasks {
            t.validate()?;
        }
        let heads: Vec<NamedHead> = tasks.iter().map(TaskSpec::named_head).collect();
        ensure!(model.config().heads == heads, "task specs do not match the model's heads");
        let uses_bn = tasks.iter().any(|t| matches!(t.head.kind, HeadKind::SpeakerId | HeadKind::SpeechCommand));
        ensure!(
            !uses_bn || config.batch_size >= 2,
            "batch_size must be >= 2 when a head uses batch norm, got {}",
            config.batch_size
        );
        let optims = Optimizers::new(&model);
        Ok(Self { model, tasks, config, optims, epoch: 0, snapshot: serde_json::Value::Null })
    }

    /// Fresh model initialised from `config.seed`.
    pub fn from_tasks(trunk: TrunkConfig, tasks: Vec<TaskSpec>, config: TrainConfig) -> Result<Self> {
        let mc = ModelConfig { trunk, heads: tasks.iter().map(TaskSpec::named_head).collect() };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, TAG_INIT]));
        let model = Model::new(mc, &mut rng)?;
        Self::new(model, tasks, config)
    }

    /// Run configuration stored in checkpoints.
    pub fn with_snapshot(mut self, snapshot: serde_json::Value) -> Self {
        self.snapshot = snapshot;
        self
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.config
    }

    pub fn optimizers(&self) -> &Optimizers<F> {
        &self.optims
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Learning rates of every group at `epoch`, trunk first.
    pub fn learning_rates(&self, epoch: usize) -> Vec<f64> {
        std::iter::once(self.config.schedule.effective_lr(self.config.trunk_lr, epoch))
            .chain(self.tasks.iter().map(|t| t.schedule.effective_lr(t.optimizer.lr, epoch)))
            .collect()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.model, Some(&self.optims), self.epoch as u64, self.snapshot.clone())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Restores model, optimiser state and epoch counter.
    pub fn resume_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.restore(&mut self.model, Some(&mut self.optims))?;
        self.epoch = ckpt.epoch as usize;
        Ok(())
    }

    fn check_data(&self, data: &[TaskData], pipeline: &Pipeline) -> Result<()> {
        ensure!(data.len() == self.tasks.len(), "{} datasets for {} tasks", data.len(), self.tasks.len());
        ensure!(
            (pipeline.clip_seconds - self.config.clip_seconds).abs() < 1e-12,
            "pipeline clip length {} s differs from training config {} s",
            pipeline.clip_seconds,
            self.config.clip_seconds
        );
        let t = pipeline.clip_len();
        for (task, d) in self.tasks.iter().zip(data) {
            let min = task.head.min_frames();
            ensure!(t >= min, "task `{}` needs clips of at least {min} samples, clip_seconds gives {t}", task.name);
            if task.head.kind.is_classification() {
                for c in &d.clips {
                    match c.label {
                        Some(l) if l < task.head.num_classes => {}
                        Some(l) => {
                            return Err(Error::Data(format!(
                                "clip {} has label {l} but task `{}` has {} classes",
                                c.source_id, task.name, task.head.num_classes
                            )))
                        }
                        None => return Err(Error::Data(format!("clip {} of task `{}` has no label", c.source_id, task.name))),
                    }
                }
            }
        }
        Ok(())
    }

    /// Trains from the current epoch up to `config.epochs`.
    pub fn fit(&mut self, data: &[TaskData], pipeline: &Pipeline, outputs: &FitOutputs) -> Result<TrainLog> {
        self.check_data(data, pipeline)?;
        let sizes: Vec<usize> = data.iter().map(TaskData::len).collect();
        let kinds: Vec<HeadKind> = self.tasks.iter().map(|t| t.head.kind).collect();
        if let Some(dir) = &outputs.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut writer = LogWriter::open(outputs.log_path.as_deref(), self.epoch > 0)?;
        let mut log = TrainLog::default();
        let n = self.tasks.len();
        while self.epoch < self.config.epochs {
            let e = self.epoch;
            let source = BatchSource {
                plan: EpochPlan::new(&sizes, self.config.batch_size, self.config.seed, e)?,
                kinds: kinds.clone(),
                data,
                pipeline,
                seed: self.config.seed,
                epoch: e,
            };
            let lrs = self.learning_rates(e);
            let trunk_opt = self.config.trunk_optimizer();
            let mut loss_sums = vec![0.0; n];
            let mut metrics = vec![MetricAcc::default(); n];
            let steps = source.plan.steps();
            let Self { model, tasks, config, optims, .. } = self;
            let configs: Vec<&AdamConfig> = std::iter::once(&trunk_opt).chain(tasks.iter().map(|t| &t.optimizer)).collect();
            prefetch(steps, config.workers, 2, |s| source.batches::<F>(s), |s, batches| {
                let ctx = StepContext { seed: config.seed, epoch: e, step: s };
                let g = compute_gradients(model, tasks, &batches, ctx, config.freeze_trunk)?;
                apply_gradients(model, optims, &configs, &lrs, &g)?;
                for i in 0..n {
                    loss_sums[i] += g.losses[i];
                    metrics[i].add(g.metrics[i]);
                }
                log.steps.push(StepRecord { epoch: e, step: s, losses: g.losses, total: g.total });
                Ok(())
            })
            .inspect_err(|_| {
                let _ = writer.flush();
            })?;
            for i in 0..n {
                let r = EpochRecord {
                    epoch: e,
                    task: self.tasks[i].name.clone(),
                    loss: loss_sums[i] / steps as f64,
                    metric: metrics[i].value(),
                    lr: lrs[i + 1],
                };
                writer.write_line(&r.csv_row())?;
                log.epochs.push(r);
            }
            writer.flush()?;
            log::info!(
                "epoch {e}: {}",
                log.epochs[log.epochs.len() - n..]
                    .iter()
                    .map(|r| format!("{} loss {:.5} metric {:.4}", r.task, r.loss, r.metric))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            self.epoch += 1;
            if let Some(dir) = &outputs.checkpoint_dir {
                if self.config.checkpoint_every > 0 && self.epoch.is_multiple_of(self.config.checkpoint_every) {
                    self.save_checkpoint(dir.join(format!("epoch_{:04}.wtrk", self.epoch)))?;
                }
            }
            if let Some(th) = self.config.early_stop_top1 {
                let recent = &log.epochs[log.epochs.len() - n..];
                let cls: Vec<&EpochRecord> =
                    recent.iter().zip(&self.tasks).filter(|(_, t)| t.head.kind.is_classification()).map(|(r, _)| r).collect();
                if !cls.is_empty() && cls.iter().all(|r| r.metric >= th) {
                    log.stopped_early = true;
                    break;
                }
            }
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            self.save_checkpoint(dir.join("last.wtrk"))?;
        }
        Ok(log)
    }

    /// Eval-mode logits of a classification task over a whole dataset,
    /// centre-cropped, in chunks of `batch_size`.
    pub fn predict_dataset(&self, task: &str, data: &TaskData, pipeline: &Pipeline) -> Result<(crate::ndgrad::Array<F>, Vec<usize>)> {
        predict_dataset(&self.model, task, data, pipeline, self.config.batch_size)
    }
}

/// Eval-mode outputs of classification task `task` for every clip of
/// `data`, with the clips' labels.
pub fn predict_dataset<F: Scalar>(
    model: &Model<F>,
    task: &str,
    data: &TaskData,
    pipeline: &Pipeline,
    batch_size: usize,
) -> Result<(crate::ndgrad::Array<F>, Vec<usize>)> {
    let i = model.head_index(task).ok_or_else(|| Error::invalid(format!("model has no task `{task}`")))?;
    let kind = model.heads()[i].kind();
    ensure!(kind.is_classification(), "task `{task}` is not a classification task");
    ensure!(!data.is_empty(), "no clips to evaluate");
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for chunk in data.clips.chunks(batch_size.max(1)) {
        let examples = chunk.iter().map(|c| pipeline.example(kind, c, None)).collect::<Result<Vec<_>>>()?;
        let batch = TaskBatch::<F>::from_examples(examples)?;
        if let Target::Labels(l) = &batch.target {
            labels.extend_from_slice(l);
        }
        let out = model.predict(task, &batch.input)?;
        rows.extend_from_slice(out.data());
    }
    let c = rows.len() / labels.len();
    Ok((crate::ndgrad::Array::new(vec![labels.len(), c], rows)?, labels))
}

/// Settings of one stage of [`pretrain_then_finetune`].
pub struct Stage<'a> {
    pub tasks: Vec<TaskSpec>,
    pub config: TrainConfig,
    pub data: &'a [TaskData],
    pub pipeline: &'a Pipeline,
    pub outputs: FitOutputs,
}

/// Trains `pretrain`, saves it to `checkpoint`, then trains a fresh
/// model for `finetune` whose trunk is loaded from that file.
pub fn pretrain_then_finetune<F: Scalar>(
    trunk: TrunkConfig,
    pretrain: Stage,
    finetune: Stage,
    checkpoint: &Path,
) -> Result<(Trainer<F>, TrainLog, TrainLog)> {
    let mut first = Trainer::<F>::from_tasks(trunk, pretrain.tasks, pretrain.config)?;
    let log1 = first.fit(pretrain.data, pretrain.pipeline, &pretrain.outputs)?;
    first.save_checkpoint(checkpoint)?;
    let mut second = finetune_from(&Checkpoint::load(checkpoint)?, finetune.tasks, finetune.config)?;
    let log2 = second.fit(finetune.data, finetune.pipeline, &finetune.outputs)?;
    Ok((second, log1, log2))
}

/// Fresh heads for `tasks` on the trunk stored in `ckpt`.
pub fn finetune_from<F: Scalar>(ckpt: &Checkpoint, tasks: Vec<TaskSpec>, config: TrainConfig) -> Result<Trainer<F>> {
    let trunk = ckpt.meta()?.model.trunk;
    let mut t = Trainer::<F>::from_tasks(trunk, tasks, config)?;
    ckpt.restore_trunk(&mut t.model)?;
    Ok(t)
}
