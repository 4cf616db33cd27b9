use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{derive_seed, TaskBatch, TAG_DROPOUT};
use super::model::Model;
use super::TaskSpec;
use crate::error::{ensure, Error, Result};
use crate::heads::{delayed_frames, next_step_frames, HeadKind, Target};
use crate::ndgrad::{AdamConfig, AdamState, Array, Mode, Scalar, Tape, Var};
use crate::nn::Module;
use crate::trunk::trunk_forward;

/// Position of a step within a run; seeds dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
}

/// Running sum for an epoch metric.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAcc {
    pub sum: f64,
    pub count: usize,
}

impl MetricAcc {
    pub fn add(&mut self, other: MetricAcc) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Losses and per-group parameter gradients of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub losses: Vec<f64>,
    /// `Σ αᵢ ℒᵢ` as computed on the tape.
    pub total: f64,
    /// `groups[0]` is the trunk (empty when frozen), then one per head.
    pub groups: Vec<Vec<Vec<F>>>,
    /// Top-1 hits for classification, absolute error for regression.
    pub metrics: Vec<MetricAcc>,
}

/// One Adam state per parameter group, in [`Model::groups`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers<F> {
    pub states: Vec<AdamState<F>>,
}

impl<F: Scalar> Optimizers<F> {
    pub fn new(model: &Model<F>) -> Self {
        let states = (0..=model.heads().len())
            .map(|g| AdamState::new(model.group_params(g).into_iter().map(|(_, a)| a)))
            .collect();
        Self { states }
    }
}

fn metric<F: Scalar>(kind: HeadKind, out: &Array<F>, batch: &TaskBatch<F>, rf: usize, warmup: bool) -> Result<MetricAcc> {
    match (&batch.target, kind) {
        (Target::Labels(labels), _) => {
            let c = out.dim(1);
            let hits = out
                .data()
                .chunks_exact(c)
                .zip(labels)
                .filter(|(row, &l)| crate::metrics::rank(row, l) == 1)
                .count();
            Ok(MetricAcc { sum: hits as f64, count: labels.len() })
        }
        (Target::Signal(clean), k) => {
            let (b, t) = (out.dim(0), out.dim(2));
            let (frames, shift, reference) = if k == HeadKind::NextStep {
                let f = next_step_frames(t, rf, warmup)?;
                (f, 1isize, &batch.input)
            } else {
                let f = delayed_frames(t, rf)?;
                let d = -(f.start as isize);
                (f, d, clean)
            };
            let mut acc = MetricAcc::default();
            for r in 0..b {
                let p = &out.data()[r * t..(r + 1) * t];
                let y = &reference.data()[r * t..(r + 1) * t];
                for i in frames.clone() {
                    acc.sum += (p[i] - y[(i as isize + shift) as usize]).as_f64().abs();
                    acc.count += 1;
                }
            }
            Ok(acc)
        }
    }
}

/// Forward every task through the shared trunk, form `Σ αᵢ ℒᵢ`, and
/// backpropagate once.
pub fn compute_gradients<F: Scalar>(
    model: &mut Model<F>,
    tasks: &[TaskSpec],
    batches: &[TaskBatch<F>],
    ctx: StepContext,
    freeze_trunk: bool,
) -> Result<Gradients<F>> {
    ensure!(tasks.len() == model.heads().len(), "{} task specs for {} heads", tasks.len(), model.heads().len());
    ensure!(batches.len() == tasks.len(), "{} batches for {} tasks", batches.len(), tasks.len());
    let rf = model.receptive_field();
    let trunk_cfg = *model.trunk_config();
    let mut tape = Tape::new();
    let trunk_vars = model.trunk.bind(&mut tape, !freeze_trunk);
    let mut head_vars: Vec<Vec<Var>> = Vec::with_capacity(tasks.len());
    let mut loss_vars = Vec::with_capacity(tasks.len());
    let mut losses = Vec::with_capacity(tasks.len());
    let mut metrics = Vec::with_capacity(tasks.len());
    for (i, (task, batch)) in tasks.iter().zip(batches).enumerate() {
        ensure!(!batch.is_empty(), "empty batch for task `{}`", task.name);
        let x = tape.constant(batch.input.clone());
        let emb = trunk_forward(&mut tape, x, &trunk_vars, &trunk_cfg)?;
        let head = &mut model.heads_mut()[i];
        let hv = head.bind(&mut tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            ctx.seed,
            ctx.epoch as u64,
            i as u64,
            ctx.step as u64,
            TAG_DROPOUT,
        ]));
        let out = head.forward_with(&mut tape, emb, &hv, Mode::Train, &mut rng)?;
        let loss = head.loss(&mut tape, out, &batch.input, &batch.target, rf)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { task: task.name.clone(), epoch: ctx.epoch, step: ctx.step });
        }
        metrics.push(metric(task.head.kind, tape.value(out), batch, rf, task.head.warmup_mask)?);
        losses.push(value);
        loss_vars.push((loss, F::of(task.weight)));
        head_vars.push(hv);
    }
    let total = tape.weighted_sum(&loss_vars)?;
    let total_value = tape.value(total).item().as_f64();
    tape.backward(total)?;
    let collect = |vars: &[Var]| -> Vec<Vec<F>> {
        vars.iter()
            .map(|&v| tape.grad(v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); tape.value(v).len()]))
            .collect()
    };
    let mut groups = Vec::with_capacity(tasks.len() + 1);
    groups.push(if freeze_trunk { Vec::new() } else { collect(&trunk_vars) });
    groups.extend(head_vars.iter().map(|hv| collect(hv)));
    Ok(Gradients { losses, total: total_value, groups, metrics })
}

/// One Adam step per group at learning rates `lrs` (trunk first). Groups
/// with no gradients are left untouched.
pub fn apply_gradients<F: Scalar>(
    model: &mut Model<F>,
    optims: &mut Optimizers<F>,
    configs: &[&AdamConfig],
    lrs: &[f64],
    grads: &Gradients<F>,
) -> Result<()> {
    let n = model.heads().len() + 1;
    ensure!(optims.states.len() == n && configs.len() == n && lrs.len() == n, "optimiser groups do not match the model");
    for g in 0..n {
        if grads.groups[g].is_empty() {
            continue;
        }
        let mut params: Vec<&mut Array<F>> = model.group_params_mut(g).into_iter().map(|(_, a)| a).collect();
        let gs: Vec<&[F]> = grads.groups[g].iter().map(Vec::as_slice).collect();
        optims.states[g].step(&mut params, &gs, configs[g], lrs[g])?;
    }
    Ok(())
}
