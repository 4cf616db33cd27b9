use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavetrunk::audiopipe::AudioClip;
use wavetrunk::heads::{HeadKind, HeadSpec};
use wavetrunk::ndgrad::{Array, LrSchedule, Scalar};
use wavetrunk::synth::SynthConfig;
use wavetrunk::train::*;
use wavetrunk::trunk::TrunkConfig;
use wavetrunk::Error;

const CLIP_SECONDS: f64 = 0.02;

fn clips(classes: usize, per_class: usize, salt: u64) -> Vec<AudioClip> {
    let cfg = SynthConfig { classes, clip_seconds: CLIP_SECONDS + 0.01, ..Default::default() };
    (0..classes).flat_map(|k| (0..per_class).map(move |i| (k, i))).map(|(k, i)| cfg.clip(k, i, salt).0).collect()
}

fn trunk() -> TrunkConfig {
    TrunkConfig::new(2, 2, 4)
}

fn tagging(classes: usize) -> TaskSpec {
    TaskSpec::new("tag", HeadSpec::new(HeadKind::Tagging).with_classes(classes).with_hidden(8)).with_lr(1e-2)
}

fn ssl(kind: HeadKind) -> TaskSpec {
    TaskSpec::new(kind.name(), HeadSpec::new(kind).with_hidden(4))
}

fn four_tasks() -> Vec<TaskSpec> {
    vec![
        tagging(3).with_weight(0.3),
        ssl(HeadKind::NextStep).with_weight(1.7),
        ssl(HeadKind::Denoise).with_weight(0.5),
        ssl(HeadKind::Upsample).with_weight(2.0),
    ]
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 4, epochs, seed: 7, clip_seconds: CLIP_SECONDS, trunk_lr: 1e-2, ..Default::default() }
}

fn pipeline() -> Pipeline {
    Pipeline::new(DataConfig::default(), CLIP_SECONDS).unwrap()
}

fn batches<F: Scalar>(tasks: &[TaskSpec], data: &TaskData, pipe: &Pipeline) -> Vec<TaskBatch<F>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let ex = data.clips[..4]
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let mut rng = ChaCha8Rng::seed_from_u64((i * 10 + j) as u64);
                    pipe.example(t.head.kind, c, Some(&mut rng)).unwrap()
                })
                .collect();
            TaskBatch::from_examples(ex).unwrap()
        })
        .collect()
}

fn with_weights(tasks: &[TaskSpec], w: &[f64]) -> Vec<TaskSpec> {
    tasks.iter().zip(w).map(|(t, &w)| t.clone().with_weight(w)).collect()
}

fn ctx() -> StepContext {
    StepContext { seed: 1, epoch: 0, step: 0 }
}

fn tensors<F: Scalar>(m: &Model<F>) -> Vec<(String, Vec<F>)> {
    m.tensors().into_iter().map(|(n, a)| (n, a.data().to_vec())).collect()
}

#[test]
fn total_loss_is_the_weighted_sum() {
    let tasks = four_tasks();
    let data = TaskData::new(clips(3, 2, 11));
    let pipe = pipeline();
    let mut t32 = Trainer::<f32>::from_tasks(trunk(), tasks.clone(), config(1)).unwrap();
    let g = compute_gradients(&mut t32.model, &tasks, &batches(&tasks, &data, &pipe), ctx(), false).unwrap();
    let want: f64 = g.losses.iter().zip(&tasks).map(|(l, t)| t.weight * l).sum();
    assert!((g.total - want).abs() <= 1e-6 * want.abs().max(1.0), "{} vs {want}", g.total);

    let mut t64 = Trainer::<f64>::from_tasks(trunk(), tasks.clone(), config(1)).unwrap();
    let g = compute_gradients(&mut t64.model, &tasks, &batches(&tasks, &data, &pipe), ctx(), false).unwrap();
    let want: f64 = g.losses.iter().zip(&tasks).map(|(l, t)| t.weight * l).sum();
    assert!((g.total - want).abs() <= 1e-12 * want.abs().max(1.0));
}

#[test]
fn trunk_gradient_is_additive_over_tasks() {
    let tasks = four_tasks();
    let data = TaskData::new(clips(3, 2, 11));
    let pipe = pipeline();
    let b = batches::<f64>(&tasks, &data, &pipe);
    let base = Trainer::<f64>::from_tasks(trunk(), tasks.clone(), config(1)).unwrap().model;
    let joint = compute_gradients(&mut base.clone(), &tasks, &b, ctx(), false).unwrap();
    let mut summed: Vec<Vec<f64>> = joint.groups[0].iter().map(|g| vec![0.0; g.len()]).collect();
    for i in 0..tasks.len() {
        let mut w = vec![0.0; tasks.len()];
        w[i] = tasks[i].weight;
        let single = compute_gradients(&mut base.clone(), &with_weights(&tasks, &w), &b, ctx(), false).unwrap();
        for (acc, g) in summed.iter_mut().zip(&single.groups[0]) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
        // head gradients only see their own loss
        assert_eq!(single.groups[i + 1], joint.groups[i + 1]);
    }
    for (a, b) in summed.iter().flatten().zip(joint.groups[0].iter().flatten()) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
    }
}

#[test]
fn zero_weight_task_is_excluded_exactly() {
    let tasks = four_tasks();
    let data = TaskData::new(clips(3, 2, 11));
    let pipe = pipeline();
    let b = batches::<f32>(&tasks, &data, &pipe);
    let excluded = with_weights(&tasks, &[0.3, 1.7, 0.0, 2.0]);
    let mut full = Trainer::<f32>::from_tasks(trunk(), excluded.clone(), config(1)).unwrap();
    let g = compute_gradients(&mut full.model, &excluded, &b, ctx(), false).unwrap();
    assert!(g.groups[3].iter().flatten().all(|&v| v == 0.0));

    // the same model without the denoise head
    let kept = [0, 1, 3];
    let sub_tasks: Vec<TaskSpec> = kept.iter().map(|&i| excluded[i].clone()).collect();
    let mut sub = Model::<f32>::new(
        ModelConfig { trunk: trunk(), heads: sub_tasks.iter().map(TaskSpec::named_head).collect() },
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    sub.trunk = full.model.trunk.clone();
    for (j, &i) in kept.iter().enumerate() {
        sub.heads_mut()[j] = full.model.heads()[i].clone();
    }
    let sub_b: Vec<TaskBatch<f32>> = kept.iter().map(|&i| b[i].clone()).collect();
    let gs = compute_gradients(&mut sub, &sub_tasks, &sub_b, ctx(), false).unwrap();
    assert_eq!(gs.groups[0], g.groups[0]);

    // and training never moves the excluded head
    let before = full.model.heads()[2].clone();
    full.fit(&[data.clone(), data.clone(), data.clone(), data], &pipe, &FitOutputs::default()).unwrap();
    assert_eq!(full.model.heads()[2], before);
}

#[test]
fn zero_epochs_is_a_no_op() {
    let mut t = Trainer::<f32>::from_tasks(trunk(), vec![tagging(3)], config(0)).unwrap();
    let before = tensors(&t.model);
    let log = t.fit(&[TaskData::new(clips(3, 2, 11))], &pipeline(), &FitOutputs::default()).unwrap();
    assert!(log.epochs.is_empty() && log.steps.is_empty());
    assert_eq!(tensors(&t.model), before);
    assert_eq!(t.epoch(), 0);
}

#[test]
fn steps_per_epoch_follow_the_largest_dataset() {
    let tasks = vec![tagging(3), ssl(HeadKind::NextStep)];
    let mut t = Trainer::<f32>::from_tasks(trunk(), tasks, config(2)).unwrap();
    let log = t
        .fit(&[TaskData::new(clips(3, 3, 11)), TaskData::new(clips(1, 5, 12))], &pipeline(), &FitOutputs::default())
        .unwrap();
    // max(9, 5) clips at batch 4
    assert_eq!(log.steps.len(), 2 * 3);
    assert_eq!(log.epochs.len(), 2 * 2);
    assert_eq!(log.task_losses("tag").len(), 2);
}

#[test]
fn dataset_smaller_than_a_batch_is_rejected() {
    let mut t = Trainer::<f32>::from_tasks(trunk(), vec![tagging(3)], config(1)).unwrap();
    let err = t.fit(&[TaskData::new(clips(3, 1, 11))], &pipeline(), &FitOutputs::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_) | Error::Data(_)), "{err}");
}

fn run(workers: usize) -> (Vec<(String, Vec<f32>)>, TrainLog) {
    let cfg = TrainConfig { workers, ..config(3) };
    let mut t = Trainer::<f32>::from_tasks(trunk(), four_tasks(), cfg).unwrap();
    let d = TaskData::new(clips(3, 3, 11));
    let log = t.fit(&[d.clone(), d.clone(), d.clone(), d], &pipeline(), &FitOutputs::default()).unwrap();
    (tensors(&t.model), log)
}

#[test]
fn fixed_seed_runs_are_bit_identical_for_any_worker_count() {
    let (a, la) = run(0);
    let (b, lb) = run(0);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    for w in [1, 3] {
        let (c, lc) = run(w);
        assert_eq!(a, c, "workers={w}");
        assert_eq!(la, lc, "workers={w}");
    }
}

#[test]
fn different_seeds_diverge() {
    let d = TaskData::new(clips(3, 2, 11));
    let mut a = Trainer::<f32>::from_tasks(trunk(), vec![tagging(3)], config(1)).unwrap();
    let mut b = Trainer::<f32>::from_tasks(trunk(), vec![tagging(3)], TrainConfig { seed: 8, ..config(1) }).unwrap();
    a.fit(std::slice::from_ref(&d), &pipeline(), &FitOutputs::default()).unwrap();
    b.fit(&[d], &pipeline(), &FitOutputs::default()).unwrap();
    assert_ne!(tensors(&a.model), tensors(&b.model));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = TaskData::new(clips(3, 2, 11));
    let mut t = Trainer::<f32>::from_tasks(trunk(), four_tasks(), config(2)).unwrap();
    t.fit(&[d.clone(), d.clone(), d.clone(), d], &pipeline(), &FitOutputs::default()).unwrap();
    let path = dir.path().join("a.wtrk");
    t.save_checkpoint(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    assert_eq!(ck.epoch, 2);
    let m = ck.to_model::<f32>().unwrap();
    assert_eq!(tensors(&m), tensors(&t.model));

    let mut fresh = Trainer::<f32>::from_tasks(trunk(), four_tasks(), TrainConfig { seed: 99, ..config(2) }).unwrap();
    fresh.resume_from(&ck).unwrap();
    assert_eq!(tensors(&fresh.model), tensors(&t.model));
    assert_eq!(fresh.optimizers(), t.optimizers());
    assert_eq!(fresh.epoch(), 2);
}

#[test]
fn damaged_checkpoints_are_rejected_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::<f32>::from_tasks(trunk(), vec![tagging(3)], config(1)).unwrap();
    let path = dir.path().join("a.wtrk");
    t.save_checkpoint(&path).unwrap();
    let bytes = fs::read(&path).unwrap();

    let truncated = dir.path().join("t.wtrk");
    fs::write(&truncated, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(Checkpoint::load(&truncated), Err(Error::Checkpoint(_))));

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());

    // a valid file for another model leaves the target untouched
    let mut other = Trainer::<f32>::from_tasks(trunk(), vec![tagging(5)], TrainConfig { seed: 3, ..config(1) }).unwrap();
    let before = tensors(&other.model);
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(other.resume_from(&ck).is_err());
    assert_eq!(tensors(&other.model), before);
}

#[test]
fn missing_tensors_are_listed_by_name() {
    let t = Trainer::<f32>::from_tasks(trunk(), vec![tagging(3)], config(1)).unwrap();
    let mut ck = t.checkpoint().unwrap();
    ck.tensors.retain(|r| r.name != "trunk.layer01.gate.weight" && r.name != "trunk.input.bias");
    let mut target = Trainer::<f32>::from_tasks(trunk(), vec![tagging(3)], TrainConfig { seed: 5, ..config(1) }).unwrap();
    let before = tensors(&target.model);
    let msg = ck.restore_trunk(&mut target.model).unwrap_err().to_string();
    assert!(msg.contains("trunk.layer01.gate.weight") && msg.contains("trunk.input.bias"), "{msg}");
    assert_eq!(tensors(&target.model), before);
    let msg = ck.restore(&mut target.model, None).unwrap_err().to_string();
    assert!(msg.contains("trunk.layer01.gate.weight"), "{msg}");
    assert_eq!(tensors(&target.model), before);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = TaskData::new(clips(3, 2, 11));
    let data = [d.clone(), d.clone(), d.clone(), d];
    let pipe = pipeline();
    let mut straight = Trainer::<f64>::from_tasks(trunk(), four_tasks(), config(4)).unwrap();
    let full_log = straight.fit(&data, &pipe, &FitOutputs::default()).unwrap();

    let log_path = dir.path().join("log.csv");
    let outputs = FitOutputs { log_path: Some(log_path.clone()), checkpoint_dir: Some(dir.path().join("ck")) };
    let mut first = Trainer::<f64>::from_tasks(trunk(), four_tasks(), config(2)).unwrap();
    first.fit(&data, &pipe, &outputs).unwrap();
    let ck = Checkpoint::load(dir.path().join("ck/last.wtrk")).unwrap();
    let mut second = Trainer::<f64>::from_tasks(trunk(), four_tasks(), TrainConfig { seed: 7, ..config(4) }).unwrap();
    second.resume_from(&ck).unwrap();
    let tail = second.fit(&data, &pipe, &outputs).unwrap();

    for ((n, a), (_, b)) in tensors(&straight.model).iter().zip(tensors(&second.model).iter()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12, "{n}: {x} vs {y}");
        }
    }
    assert_eq!(&full_log.epochs[8..], &tail.epochs[..]);
    let csv = fs::read_to_string(&log_path).unwrap();
    assert_eq!(csv, full_log.to_csv());
}

#[test]
fn frozen_trunk_is_bit_unchanged() {
    let d = TaskData::new(clips(3, 2, 11));
    let cfg = TrainConfig { freeze_trunk: true, ..config(2) };
    let mut t = Trainer::<f32>::from_tasks(trunk(), vec![tagging(3)], cfg).unwrap();
    let trunk_before = t.model.trunk.clone();
    let head_before = t.model.heads()[0].clone();
    t.fit(&[d], &pipeline(), &FitOutputs::default()).unwrap();
    assert_eq!(t.model.trunk, trunk_before);
    assert_ne!(t.model.heads()[0], head_before);
}

#[test]
fn finetuning_starts_from_the_pretrained_trunk() {
    let d = TaskData::new(clips(3, 2, 11));
    let mut pre = Trainer::<f32>::from_tasks(trunk(), vec![ssl(HeadKind::NextStep)], config(1)).unwrap();
    pre.fit(&[d], &pipeline(), &FitOutputs::default()).unwrap();
    let ck = pre.checkpoint().unwrap();
    let fine = finetune_from::<f32>(&ck, vec![tagging(3)], TrainConfig { seed: 42, ..config(1) }).unwrap();
    assert_eq!(fine.model.trunk, pre.model.trunk);

    let mut wider = Trainer::<f32>::from_tasks(TrunkConfig::new(2, 2, 6), vec![tagging(3)], config(1)).unwrap();
    let before = wider.model.trunk.clone();
    assert!(matches!(ck.restore_trunk(&mut wider.model), Err(Error::Checkpoint(_))));
    assert_eq!(wider.model.trunk, before);
}

#[test]
fn learning_rates_follow_the_step_schedule() {
    let schedule = LrSchedule { epochs_per_step: 5, multiplier: 0.95 };
    let tasks = vec![tagging(3).with_lr(2e-3)];
    let t = Trainer::<f32>::from_tasks(trunk(), tasks, TrainConfig { schedule, trunk_lr: 1e-3, ..config(1) }).unwrap();
    for (e, k) in [(0, 0), (4, 0), (5, 1), (9, 1), (10, 2), (27, 5)] {
        let lrs = t.learning_rates(e);
        assert!((lrs[0] - 1e-3 * 0.95f64.powi(k)).abs() < 1e-18);
        assert!((lrs[1] - 2e-3 * 0.95f64.powi(k)).abs() < 1e-18);
    }
}

#[test]
fn non_finite_loss_names_the_task() {
    let mut t = Trainer::<f32>::from_tasks(trunk(), vec![tagging(3)], config(1)).unwrap();
    t.model.trunk.input_w = Array::full(t.model.trunk.input_w.shape(), f32::NAN);
    let err = t.fit(&[TaskData::new(clips(3, 2, 11))], &pipeline(), &FitOutputs::default()).unwrap_err();
    match err {
        Error::NonFiniteLoss { task, epoch, step } => assert_eq!((task.as_str(), epoch, step), ("tag", 0, 0)),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn early_stop_ends_the_run() {
    let d = TaskData::new(clips(3, 2, 11));
    let cfg = TrainConfig { early_stop_top1: Some(0.0), ..config(5) };
    let mut t = Trainer::<f32>::from_tasks(trunk(), vec![tagging(3)], cfg).unwrap();
    let log = t.fit(&[d], &pipeline(), &FitOutputs::default()).unwrap();
    assert!(log.stopped_early);
    assert_eq!(log.epochs.len(), 1);
}
