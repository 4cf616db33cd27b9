//! Central finite-difference checks of every differentiable operation.
//!
//! Each check builds a small random problem in `f64`, scalarises the op
//! output as `mean((out - r)^2)` against a fixed random `r`, and compares
//! the tape gradient of every input with `(L(x+h) - L(x-h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::heads::{Head, HeadKind, HeadSpec, Target};
use crate::ndgrad::{Array, BatchNormState, Mode, Tape, Var};
use crate::nn::Module;
use crate::trunk::{trunk_forward, TrunkConfig, TrunkParams};

use super::CheckResult;

/// Per-op tolerance on the maximum elementwise relative error.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for batch norm and composite trunk+head models.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
pub const SEEDS: u64 = 5;

const STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-5;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array<f64> {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn scalarise(tape: &mut Tape<f64>, out: Var, probe: &Option<Array<f64>>) -> Result<Var> {
    match probe {
        None => Ok(out),
        Some(r) => {
            let rv = tape.constant(r.clone());
            tape.mse_loss(out, rv)
        }
    }
}

fn eval_loss(inputs: &[Array<f64>], build: &Build, probe: &Option<Array<f64>>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = scalarise(&mut tape, out, probe)?;
    Ok(tape.value(loss).item())
}

/// Maximum relative error between tape and finite-difference gradients.
///
/// `corrupt` scales the analytic gradient by 1.01 to exercise failure
/// reporting.
pub fn max_relative_error(inputs: &[Array<f64>], build: &Build, seed: u64, corrupt: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let probe = if tape.value(out).len() == 1 {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        Some(rand_array(&mut rng, tape.shape(out), 1.0))
    };
    let loss = scalarise(&mut tape, out, &probe)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            let g = tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
            if corrupt {
                g.into_iter().map(|x| x * 1.01 + 1e-3).collect()
            } else {
                g
            }
        })
        .collect();

    let mut worst = 0.0f64;
    let mut perturbed = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = x0 + STEP;
            let up = eval_loss(&perturbed, build, &probe)?;
            perturbed[i].data_mut()[j] = x0 - STEP;
            let down = eval_loss(&perturbed, build, &probe)?;
            perturbed[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

struct Case {
    name: &'static str,
    tolerance: f64,
    make: fn(&mut ChaCha8Rng) -> (Vec<Array<f64>>, Box<Build<'static>>),
}

fn tiny_trunk() -> TrunkConfig {
    TrunkConfig::new(1, 2, 4)
}

fn head_case(spec: HeadSpec, t: usize, rng: &mut ChaCha8Rng, labels: Option<Vec<usize>>) -> (Vec<Array<f64>>, Box<Build<'static>>) {
    let cfg = tiny_trunk();
    let trunk = TrunkParams::<f64>::init(&cfg, rng);
    let head = Head::<f64>::new(spec, cfg.channels, rng).unwrap();
    let batch = labels.as_ref().map_or(2, |l| l.len());
    let x = rand_array(rng, &[batch, 1, t], 0.9);
    let clean = rand_array(rng, &[batch, 1, t], 0.9);
    let n_trunk = trunk.params().len();
    let mut inputs: Vec<Array<f64>> = trunk.params().into_iter().map(|(_, a)| a.clone()).collect();
    inputs.extend(head.params().into_iter().map(|(_, a)| a.clone()));
    let build = move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut head = head.clone();
        let xv = tape.constant(x.clone());
        let emb = trunk_forward(tape, xv, &vars[..n_trunk], &cfg)?;
        // same dropout mask on every evaluation
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let out = head.forward_with(tape, emb, &vars[n_trunk..], Mode::Train, &mut rng)?;
        let target = match &labels {
            Some(l) => Target::Labels(l.clone()),
            None => Target::Signal(clean.clone()),
        };
        head.loss(tape, out, &x, &target, cfg.receptive_field())
    };
    (inputs, Box::new(build))
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "causal_conv1d_k2_d4",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[2, 3, 13], 1.0), rand_array(rng, &[2, 3, 2], 1.0), rand_array(rng, &[2], 1.0)];
                (inputs, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.causal_conv1d(v[0], v[1], v[2], 4)))
            },
        },
        Case {
            name: "causal_conv1d_k3_d1",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[1, 2, 9], 1.0), rand_array(rng, &[3, 2, 3], 1.0), rand_array(rng, &[3], 1.0)];
                (inputs, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.causal_conv1d(v[0], v[1], v[2], 1)))
            },
        },
        Case {
            name: "gated_residual",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let inputs = vec![
                    rand_array(rng, &[2, 3, 11], 1.0),
                    rand_array(rng, &[3, 3, 2], 1.0),
                    rand_array(rng, &[3], 0.5),
                    rand_array(rng, &[3, 3, 2], 1.0),
                    rand_array(rng, &[3], 0.5),
                ];
                (inputs, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.gated_residual(v[0], v[1], v[2], v[3], v[4], 2)))
            },
        },
        Case {
            name: "add",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[3, 4], 1.0), rand_array(rng, &[3, 4], 1.0)];
                (inputs, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add(v[0], v[1])))
            },
        },
        Case {
            name: "mul",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[3, 4], 1.0), rand_array(rng, &[3, 4], 1.0)];
                (inputs, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1])))
            },
        },
        Case {
            name: "sigmoid",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let mut x = rand_array(rng, &[7], 3.0);
                x.data_mut()[..3].copy_from_slice(&[-2.0, 0.0, 3.0]);
                (vec![x], Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.sigmoid(v[0]))))
            },
        },
        Case {
            name: "tanh",
            tolerance: OP_TOLERANCE,
            make: |rng| (vec![rand_array(rng, &[7], 3.0)], Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.tanh(v[0])))),
        },
        Case {
            name: "relu",
            tolerance: OP_TOLERANCE,
            make: |rng| (vec![rand_array(rng, &[9], 1.0)], Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.relu(v[0])))),
        },
        Case {
            name: "scale",
            tolerance: OP_TOLERANCE,
            make: |rng| (vec![rand_array(rng, &[5], 1.0)], Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.scale(v[0], -1.7)))),
        },
        Case {
            name: "avg_pool_time",
            tolerance: OP_TOLERANCE,
            make: |rng| (vec![rand_array(rng, &[2, 3, 6], 1.0)], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.avg_pool_time(v[0]))),
        },
        Case {
            name: "slice_time",
            tolerance: OP_TOLERANCE,
            make: |rng| (vec![rand_array(rng, &[2, 2, 8], 1.0)], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.slice_time(v[0], 3, 4))),
        },
        Case {
            name: "dense",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[3, 4], 1.0), rand_array(rng, &[4, 5], 1.0), rand_array(rng, &[5], 1.0)];
                (inputs, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.dense(v[0], v[1], v[2])))
            },
        },
        Case {
            name: "strided_conv1d",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[2, 2, 17], 1.0), rand_array(rng, &[3, 2, 4], 1.0), rand_array(rng, &[3], 1.0)];
                (inputs, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.strided_conv1d(v[0], v[1], v[2], 3)))
            },
        },
        Case {
            name: "batch_norm_train_2d",
            tolerance: COMPOSITE_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[4, 3], 1.0), rand_array(rng, &[3], 1.5), rand_array(rng, &[3], 1.0)];
                (
                    inputs,
                    Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                        let mut st = BatchNormState::new(3);
                        t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train)
                    }),
                )
            },
        },
        Case {
            name: "batch_norm_train_3d",
            tolerance: COMPOSITE_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[2, 2, 5], 1.0), rand_array(rng, &[2], 1.5), rand_array(rng, &[2], 1.0)];
                (
                    inputs,
                    Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                        let mut st = BatchNormState::new(2);
                        t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train)
                    }),
                )
            },
        },
        Case {
            name: "batch_norm_eval",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[3, 2], 1.0), rand_array(rng, &[2], 1.5), rand_array(rng, &[2], 1.0)];
                (
                    inputs,
                    Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                        let mut st = BatchNormState::new(2);
                        st.running_mean = Array::from_f64(&[2], &[0.3, -0.2]).unwrap();
                        st.running_var = Array::from_f64(&[2], &[1.7, 0.4]).unwrap();
                        t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Eval)
                    }),
                )
            },
        },
        Case {
            name: "dropout",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                (
                    vec![rand_array(rng, &[4, 6], 1.0)],
                    Box::new(|t: &mut Tape<f64>, v: &[Var]| {
                        let mut r = ChaCha8Rng::seed_from_u64(5);
                        t.dropout(v[0], 0.3, Mode::Train, &mut r)
                    }),
                )
            },
        },
        Case {
            name: "softmax_cross_entropy",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                (
                    vec![rand_array(rng, &[3, 5], 2.0)],
                    Box::new(|t: &mut Tape<f64>, v: &[Var]| t.softmax_cross_entropy(v[0], &[4, 0, 2])),
                )
            },
        },
        Case {
            name: "mse_loss",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[2, 1, 6], 1.0), rand_array(rng, &[2, 1, 6], 1.0)];
                (inputs, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mse_loss(v[0], v[1])))
            },
        },
        Case {
            name: "smooth_l1_loss",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                // spread differences across both branches, away from |d| = 1
                let pred = rand_array(rng, &[12], 1.0);
                let offsets = [0.2, -0.4, 0.7, -0.8, 1.6, -2.5, 3.0, 0.05, -1.3, 2.2, -0.6, 0.9];
                let target =
                    Array::new(vec![12], pred.data().iter().zip(offsets).map(|(p, o)| p - o).collect()).unwrap();
                (vec![pred, target], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.smooth_l1_loss(v[0], v[1])))
            },
        },
        Case {
            name: "weighted_sum",
            tolerance: OP_TOLERANCE,
            make: |rng| {
                let inputs = vec![rand_array(rng, &[1], 1.0), rand_array(rng, &[1], 1.0), rand_array(rng, &[1], 1.0)];
                (inputs, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.weighted_sum(&[(v[0], 1.0), (v[1], 0.5), (v[2], -2.0)])))
            },
        },
        Case {
            name: "composite_trunk_tagging",
            tolerance: COMPOSITE_TOLERANCE,
            make: |rng| head_case(HeadSpec::new(HeadKind::Tagging).with_classes(3).with_hidden(8), 16, rng, Some(vec![0, 2])),
        },
        Case {
            name: "composite_trunk_speaker",
            tolerance: COMPOSITE_TOLERANCE,
            make: |rng| head_case(HeadSpec::new(HeadKind::SpeakerId).with_classes(3).with_hidden(8), 16, rng, Some(vec![0, 2, 1])),
        },
        Case {
            name: "composite_trunk_speech_command",
            tolerance: COMPOSITE_TOLERANCE,
            make: |rng| {
                let mut spec = HeadSpec::new(HeadKind::SpeechCommand).with_classes(3);
                spec.conv_widths = vec![10, 5, 2];
                spec.conv_strides = vec![4, 2, 1];
                spec.conv_channels = 3;
                spec.dropout = 0.2;
                head_case(spec, 40, rng, Some(vec![1, 0, 2]))
            },
        },
        Case {
            name: "composite_trunk_next_step",
            tolerance: COMPOSITE_TOLERANCE,
            make: |rng| head_case(HeadSpec::new(HeadKind::NextStep).with_hidden(6), 16, rng, None),
        },
        Case {
            name: "composite_trunk_denoise",
            tolerance: COMPOSITE_TOLERANCE,
            make: |rng| {
                let mut spec = HeadSpec::new(HeadKind::Denoise).with_hidden(4);
                spec.filter_width = 3;
                head_case(spec, 16, rng, None)
            },
        },
    ]
}

pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every gradient check over [`SEEDS`] seeds. `corrupt` names a case
/// whose analytic gradient is deliberately perturbed.
pub fn run(corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for case in cases() {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (inputs, build) = (case.make)(&mut rng);
            let err = max_relative_error(&inputs, build.as_ref(), seed, corrupt == Some(case.name))?;
            worst = worst.max(err);
        }
        out.push(CheckResult::new(format!("gradcheck.{}", case.name), worst, case.tolerance, worst < case.tolerance));
    }
    Ok(out)
}
