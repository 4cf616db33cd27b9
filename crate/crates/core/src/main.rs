use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wavetrunk::config::{RunConfig, TaskEntry};
use wavetrunk::metrics::{render_csv, render_table, EvalResult};
use wavetrunk::synth::{write_corpus, SynthConfig};
use wavetrunk::train::{finetune_from, predict_dataset, Checkpoint, Pipeline, TaskData, Trainer};
use wavetrunk::verify::{self, Suite};
use wavetrunk::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

/// Multitask raw-waveform training with a shared causal dilated-convolution trunk.
///
/// Exit codes: 0 success, 1 runtime or verification failure, 2 configuration
/// error, 3 data error. Set WAVETRUNK_LOG (error, warn, info, debug, trace)
/// to control log output on stderr.
#[derive(Parser)]
#[command(name = "wavetrunk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every task of a config jointly.
    Train(TrainArgs),
    /// Train self-supervised tasks only and save the resulting checkpoint.
    Pretrain(PretrainArgs),
    /// Train fresh heads on the trunk of a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Score classification tasks of a checkpoint (MAP@3, top-1, top-5).
    Evaluate(EvaluateArgs),
    /// Write a synthetic labelled and unlabelled corpus.
    Synth(SynthArgs),
    /// Run built-in verification suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.workers (0 prepares batches on the training thread).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Where to write the final checkpoint [default: <io.checkpoint_dir>/pretrained.wtrk].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pretrained checkpoint whose trunk is loaded.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Continue an interrupted fine-tuning run from its own checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write the final checkpoint here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSON run configuration naming the tasks to score.
    #[arg(long)]
    config: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to score instead of each task's own.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Manifest split to score [default: the task's split].
    #[arg(long)]
    split: Option<String>,
    /// Write the results as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON corpus settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    clips_per_class: Option<usize>,
    /// Extra clips per class in split `test`.
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    unlabeled: Option<usize>,
    #[arg(long)]
    clip_seconds: Option<f64>,
    /// Clip-to-background SNR in dB.
    #[arg(long)]
    snr_db: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// gradcheck, dsp, props or all.
    suite: String,
    /// Perturb the analytic gradient of one gradcheck case.
    #[arg(long, hide = true)]
    corrupt_op: Option<String>,
}

struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
            Error::Data(_) | Error::Format { .. } => EXIT_DATA,
            _ => EXIT_FAILURE,
        };
        Failure { code, error }
    }
}

fn data_err(error: Error) -> Failure {
    Failure { code: EXIT_DATA, error }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_CONFIG, error: Error::Config(msg.into()) }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(run: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(s) = run.seed {
        cfg.train.seed = s;
    }
    if let Some(w) = run.workers {
        cfg.train.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn snapshot(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

fn task_data(entry: &TaskEntry, manifest: Option<&Path>, split: Option<&str>, rate: u32) -> CliResult<TaskData> {
    let path = manifest
        .or_else(|| entry.data_manifest())
        .ok_or_else(|| config_err(format!("task `{}` has no manifest", entry.name())))?;
    let data = TaskData::from_manifest(path, split, rate).map_err(data_err)?;
    if data.is_empty() {
        return Err(data_err(Error::Data(format!(
            "{} has no rows{}",
            path.display(),
            split.map(|s| format!(" in split `{s}`")).unwrap_or_default()
        ))));
    }
    Ok(data)
}

fn load_data(cfg: &RunConfig, pipeline: &Pipeline) -> CliResult<Vec<TaskData>> {
    cfg.tasks.iter().map(|t| task_data(t, None, t.split.as_deref(), pipeline.sample_rate)).collect()
}

fn report(trainer: &Trainer<f32>, log: &wavetrunk::train::TrainLog) {
    let n = trainer.tasks().len();
    if log.epochs.len() >= n {
        for r in &log.epochs[log.epochs.len() - n..] {
            println!("epoch {} task {} loss {:.6} metric {:.4}", r.epoch, r.task, r.loss, r.metric);
        }
    }
    if log.stopped_early {
        println!("stopped early after epoch {}", trainer.epoch());
    }
}

fn fit(mut trainer: Trainer<f32>, cfg: &RunConfig, resume: Option<&Path>) -> CliResult<Trainer<f32>> {
    let pipeline = Pipeline::new(cfg.data.clone(), cfg.train.clip_seconds).map_err(data_err)?;
    let data = load_data(cfg, &pipeline)?;
    if let Some(p) = resume {
        trainer.resume_from(&Checkpoint::load(p)?)?;
        log::info!("resuming after epoch {}", trainer.epoch());
    }
    let log = trainer.fit(&data, &pipeline, &cfg.outputs())?;
    report(&trainer, &log);
    Ok(trainer)
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = load_config(&a.run)?;
    let trainer = Trainer::<f32>::from_tasks(cfg.trunk(), cfg.task_specs(), cfg.train.clone())?.with_snapshot(snapshot(&cfg));
    fit(trainer, &cfg, a.resume.as_deref())?;
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> CliResult<()> {
    let cfg = load_config(&a.run)?;
    if let Some(t) = cfg.tasks.iter().find(|t| !t.kind.is_self_supervised()) {
        return Err(config_err(format!("pretraining takes self-supervised tasks only, `{}` is {}", t.name(), t.kind.name())));
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.io.checkpoint_dir.as_ref().map(|d| d.join("pretrained.wtrk")))
        .ok_or_else(|| config_err("pretrain needs --out or io.checkpoint_dir"))?;
    let trainer = Trainer::<f32>::from_tasks(cfg.trunk(), cfg.task_specs(), cfg.train.clone())?.with_snapshot(snapshot(&cfg));
    let trainer = fit(trainer, &cfg, a.resume.as_deref())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    trainer.save_checkpoint(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs) -> CliResult<()> {
    let cfg = load_config(&a.run)?;
    if cfg.tasks.iter().all(|t| t.kind.is_self_supervised()) {
        return Err(config_err("fine-tuning needs at least one supervised task"));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let trunk = ckpt.meta()?.model.trunk;
    if let Some(t) = cfg.trunk {
        if t != trunk {
            return Err(config_err(format!("config trunk {t:?} does not match checkpoint trunk {trunk:?}")));
        }
    }
    let trainer = finetune_from::<f32>(&ckpt, cfg.task_specs(), cfg.train.clone())?.with_snapshot(snapshot(&cfg));
    let trainer = fit(trainer, &cfg, a.resume.as_deref())?;
    if let Some(out) = &a.out {
        trainer.save_checkpoint(out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config)?;
    cfg.validate()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model::<f32>()?;
    let pipeline = Pipeline::new(cfg.data.clone(), cfg.train.clip_seconds).map_err(data_err)?;
    let mut results = Vec::new();
    for entry in cfg.tasks.iter().filter(|t| t.kind.is_classification()) {
        let name = entry.name();
        let i = model
            .head_index(&name)
            .ok_or_else(|| config_err(format!("checkpoint has no task `{name}`")))?;
        let have = model.heads()[i].spec();
        let want = entry.head();
        if *have != want {
            return Err(config_err(format!(
                "task `{name}`: checkpoint head is {} with {} classes and {} hidden units, config asks for {} with {} classes and {} hidden units",
                have.kind.name(),
                have.num_classes,
                have.hidden_units,
                want.kind.name(),
                want.num_classes,
                want.hidden_units
            )));
        }
        let split = a.split.as_deref().or(entry.split.as_deref());
        let data = task_data(entry, a.manifest.as_deref(), split, pipeline.sample_rate)?;
        if let Some(l) = data.clips.iter().filter_map(|c| c.label).find(|&l| l >= have.num_classes) {
            return Err(data_err(Error::Data(format!(
                "task `{name}`: label index {l} out of range for {} classes",
                have.num_classes
            ))));
        }
        let (logits, labels) = predict_dataset(&model, &name, &data, &pipeline, cfg.train.batch_size)?;
        results.push(EvalResult::compute(name, &logits, &labels)?);
    }
    if results.is_empty() {
        return Err(config_err("config lists no classification task to evaluate"));
    }
    print!("{}", render_table(&results));
    if let Some(out) = &a.out {
        fs::write(out, render_csv(&results)).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| config_err(format!("{}: {}: {}", p.display(), e.path(), e.inner())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.classes {
        cfg.classes = v;
    }
    if let Some(v) = a.clips_per_class {
        cfg.clips_per_class = v;
    }
    if let Some(v) = a.test_per_class {
        cfg.test_per_class = v;
    }
    if let Some(v) = a.unlabeled {
        cfg.unlabeled_clips = v;
    }
    if let Some(v) = a.clip_seconds {
        cfg.clip_seconds = v;
    }
    if let Some(v) = a.snr_db {
        cfg.snr_db = v;
    }
    let corpus = write_corpus(&cfg, &a.out)?;
    println!(
        "wrote {} clips; labelled manifest {}, unlabelled manifest {}",
        corpus.files,
        corpus.train_manifest.display(),
        corpus.unlabeled_manifest.display()
    );
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> CliResult<()> {
    let suite: Suite = a.suite.parse()?;
    if let Some(op) = &a.corrupt_op {
        if !verify::gradcheck::case_names().contains(&op.as_str()) {
            return Err(config_err(format!("unknown gradcheck case `{op}`")));
        }
    }
    let results = verify::run(suite, a.corrupt_op.as_deref())?;
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!("{} checks, {} failed", results.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: EXIT_FAILURE, error: Error::InvalidArgument(format!("failed: {}", failed.join(", "))) })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WAVETRUNK_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
