//! Structural properties: receptive field, causality, loss formulas,
//! metrics, schedule and persistence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::heads::{Head, HeadKind, HeadSpec, Target};
use crate::metrics::{map_at_3, top_k_accuracy};
use crate::ndgrad::{Array, LrSchedule, Tape};
use crate::nn::he_uniform;
use crate::train::{Checkpoint, Model, ModelConfig, NamedHead};
use crate::trunk::{embed, receptive_field, TrunkConfig, TrunkParams};

use super::CheckResult;

/// (blocks, layers per block) pairs swept by the receptive-field check.
pub const RF_CONFIGS: [(usize, usize); 3] = [(1, 2), (2, 3), (3, 6)];
pub const CAUSALITY_CASES: usize = 100;

fn random_trunk(cfg: &TrunkConfig, rng: &mut ChaCha8Rng) -> TrunkParams<f64> {
    let mut p = TrunkParams::<f64>::init(cfg, rng);
    p.input_b = he_uniform(&[cfg.channels], 1, rng);
    for a in &mut p.layers {
        a.gate_b = he_uniform(&[cfg.channels], 1, rng);
        a.filter_b = he_uniform(&[cfg.channels], 1, rng);
    }
    p
}

/// Number of input samples that change the trunk output at the last
/// frame, found by perturbing each sample in turn.
///
/// Biases and the base input are zero, so every activation starts at
/// exactly zero and no influence is lost to rounding against a large
/// residual.
pub fn measured_receptive_field(cfg: &TrunkConfig, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = TrunkParams::<f64>::init(cfg, &mut rng);
    let t = receptive_field(cfg) + 16;
    let base = vec![0.0; t];
    let last = |x: &[f64]| -> Result<Vec<f64>> {
        let out = embed(&params, cfg, &Array::new(vec![1, 1, t], x.to_vec())?)?;
        Ok(out.data().chunks_exact(t).map(|row| row[t - 1]).collect())
    };
    let reference = last(&base)?;
    let mut count = 0;
    for s in 0..t {
        let mut x = base.clone();
        x[s] += 0.25;
        if last(&x)? != reference {
            count += 1;
        }
    }
    Ok(count)
}

/// Number of random cases in which changing inputs after frame `t`
/// changed any trunk output at frames `<= t`.
pub fn causality_violations(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let cfg = TrunkConfig::new(rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let params = random_trunk(&cfg, &mut rng);
        let len = rng.gen_range(2..80);
        let t = rng.gen_range(0..len - 1);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = x.clone();
        for v in &mut y[t + 1..] {
            *v = rng.gen_range(-1.0..1.0);
        }
        let a = embed(&params, &cfg, &Array::new(vec![1, 1, len], x)?)?;
        let b = embed(&params, &cfg, &Array::new(vec![1, 1, len], y)?)?;
        let differs = a
            .data()
            .chunks_exact(len)
            .zip(b.data().chunks_exact(len))
            .any(|(ra, rb)| ra[..=t].iter().zip(&rb[..=t]).any(|(p, q)| p.to_bits() != q.to_bits()));
        bad += differs as usize;
    }
    Ok(bad)
}

/// Smooth-L1 loss of a single prediction `d` against zero.
pub fn smooth_l1_at(d: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Array::new(vec![1, 1, 1], vec![d])?);
    let z = tape.constant(Array::zeros(&[1, 1, 1]));
    let l = tape.smooth_l1_loss(p, z)?;
    Ok(tape.value(l).item())
}

/// `|CE(uniform logits) - ln C|`, worst over a few class counts.
pub fn uniform_cross_entropy_error() -> Result<f64> {
    let mut worst = 0.0f64;
    for c in [2usize, 10, 41, 1251] {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Array::full(&[3, c], 0.37));
        let l = tape.softmax_cross_entropy(logits, &[0, c / 2, c - 1])?;
        worst = worst.max((tape.value(l).item() as f64 - (c as f64).ln()).abs());
    }
    Ok(worst)
}

/// Next-step head loss and its per-frame gradient against the scalar
/// formula `(y_t - x_{t+1})^2`; returns the worst relative difference.
pub fn next_step_loss_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = Head::<f64>::new(HeadSpec::new(HeadKind::NextStep).with_hidden(2), 2, &mut rng)?;
    let (b, t) = (2, 40);
    let x: Vec<f64> = (0..b * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..b * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let input = Array::new(vec![b, 1, t], x.clone())?;
    let mut tape = Tape::new();
    let pred = tape.param(Array::new(vec![b, 1, t], y.clone())?);
    let loss = head.loss(&mut tape, pred, &input, &Target::Labels(Vec::new()), 1)?;
    let got = tape.value(loss).item();
    tape.backward(loss)?;
    let n = (b * (t - 1)) as f64;
    let mut want = 0.0;
    let mut worst = 0.0f64;
    let grad = tape.grad(pred).expect("prediction gradient");
    for r in 0..b {
        for i in 0..t {
            let k = r * t + i;
            let g_want = if i + 1 < t {
                let e = y[k] - x[k + 1];
                want += e * e;
                2.0 * e / n
            } else {
                0.0
            };
            worst = worst.max((grad[k] - g_want).abs() / g_want.abs().max(1e-12));
        }
    }
    want /= n;
    Ok(worst.max((got - want).abs() / want))
}

/// Brute-force ranking by sorting, against the library metrics, on
/// `cases` random problems. Returns the number of disagreements.
pub fn metric_disagreements(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let b = rng.gen_range(1..20);
        let c = rng.gen_range(3..12);
        // coarse values so that ties occur
        let data: Vec<f64> = (0..b * c).map(|_| (rng.gen_range(-4..=4) as f64) * 0.5).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let logits = Array::new(vec![b, c], data.clone())?;
        let mut hits = [0usize; 2];
        let mut map = 0.0;
        for (row, &l) in data.chunks_exact(c).zip(&labels) {
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
            let r = order.iter().position(|&i| i == l).unwrap() + 1;
            hits[0] += (r <= 1) as usize;
            hits[1] += (r <= 3) as usize;
            map += if r <= 3 { 1.0 / r as f64 } else { 0.0 };
        }
        let ok = top_k_accuracy(&logits, &labels, 1)? == hits[0] as f64 / b as f64
            && top_k_accuracy(&logits, &labels, 3)? == hits[1] as f64 / b as f64
            && (map_at_3(&logits, &labels)? - map / b as f64).abs() <= 1e-15;
        bad += (!ok) as usize;
    }
    Ok(bad)
}

/// MAP@3 of random logits with `c` classes over `n` rows.
pub fn random_map_at_3(c: usize, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * c).map(|_| rng.gen::<f64>()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    map_at_3(&Array::new(vec![n, c], data)?, &labels)
}

/// Largest difference between the schedule and `base * 0.95^floor(e/5)`.
pub fn schedule_error() -> f64 {
    let s = LrSchedule::default();
    (0..200).map(|e| (s.effective_lr(3e-4, e) - 3e-4 * 0.95f64.powi((e / 5) as i32)).abs()).fold(0.0, f64::max)
}

/// Whether save, load and save again give identical bytes.
pub fn checkpoint_round_trip(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        trunk: TrunkConfig::new(1, 2, 3),
        heads: vec![
            NamedHead { name: "tag".into(), head: HeadSpec::new(HeadKind::Tagging).with_classes(4).with_hidden(5) },
            NamedHead { name: "spk".into(), head: HeadSpec::new(HeadKind::SpeakerId).with_classes(3).with_hidden(4) },
        ],
    };
    let model = Model::<f32>::new(cfg, &mut rng)?;
    let bytes = Checkpoint::capture(&model, None, 3, serde_json::json!({"seed": seed}))?.to_bytes();
    let again = Checkpoint::from_bytes(&bytes)?;
    let back = again.to_model::<f32>()?;
    Ok(again.to_bytes() == bytes && back.tensors() == model.tensors())
}

pub fn run() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (n, s) in RF_CONFIGS {
        let cfg = TrunkConfig::new(n, s, 2);
        let want = receptive_field(&cfg);
        let got = measured_receptive_field(&cfg, 7)?;
        let diff = (got as f64 - want as f64).abs();
        out.push(CheckResult::new(format!("props.receptive_field_{n}_{s}"), diff, 0.0, got == want));
    }
    let bad = causality_violations(CAUSALITY_CASES, 8)?;
    out.push(CheckResult::new("props.causality", bad as f64, 0.0, bad == 0));
    let sl1 = [(0.5, 0.125), (1.0, 0.5), (2.0, 1.5)]
        .iter()
        .map(|&(d, want)| smooth_l1_at(d).map(|v| (v - want).abs()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    out.push(CheckResult::new("props.smooth_l1_values", sl1, 0.0, sl1 == 0.0));
    let ce = uniform_cross_entropy_error()?;
    out.push(CheckResult::new("props.uniform_cross_entropy", ce, 1e-6, ce < 1e-6));
    let ns = next_step_loss_error(9)?;
    out.push(CheckResult::new("props.next_step_loss", ns, 1e-12, ns < 1e-12));
    let bad = metric_disagreements(1000, 10)?;
    out.push(CheckResult::new("props.metrics_brute_force", bad as f64, 0.0, bad == 0));
    let expect = (1.0 + 0.5 + 1.0 / 3.0) / 41.0;
    let dev = (random_map_at_3(41, 100_000, 11)? - expect).abs();
    out.push(CheckResult::new("props.random_map_at_3", dev, 0.005, dev <= 0.005));
    let lr = schedule_error();
    out.push(CheckResult::new("props.lr_schedule", lr, 0.0, lr == 0.0));
    let ok = checkpoint_round_trip(12)?;
    out.push(CheckResult::new("props.checkpoint_round_trip", (!ok) as u8 as f64, 0.0, ok));
    Ok(out)
}
