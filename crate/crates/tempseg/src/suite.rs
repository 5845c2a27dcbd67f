//! Gradient verification suite: central-difference checks for every tape
//! primitive, the ConvLSTM step (all variants, chained over time), each
//! architecture at toy size, and the total loss end to end. Used by both the
//! `gradcheck` subcommand and the acceptance tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convlstm::{
    step, zero_state, CellVars, ConvLstmCell, ConvLstmConfig, StateActivation, Variant,
};
use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::kernels::ConvKind;
use crate::losses::{
    compute_masks, total_loss_grad, LabelVolume, LossConfig, PredictionVolume,
};
use crate::models::{Architecture, LstmPosition, Model, ModelSpec};
use crate::tape::Var;
use crate::{Tape, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Cell,
    Model,
    Loss,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "primitives" => Ok(Scope::Primitives),
            "cell" => Ok(Scope::Cell),
            "model" => Ok(Scope::Model),
            "loss" => Ok(Scope::Loss),
            "all" => Ok(Scope::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown gradcheck scope '{}' (primitives|cell|model|loss|all)",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub name: String,
    pub max_err: f64,
}

impl SuiteRow {
    pub fn pass(&self) -> bool {
        self.max_err.is_finite() && self.max_err <= TOLERANCE
    }
}

pub fn format_rows(rows: &[SuiteRow]) -> String {
    let mut s = format!("{:<28} {:>12}  {}\n", "check", "max rel err", "status");
    for row in rows {
        s.push_str(&format!(
            "{:<28} {:>12.3e}  {}\n",
            row.name,
            row.max_err,
            if row.pass() { "pass" } else { "FAIL" }
        ));
    }
    s
}

/// Checks the gradient of `sum(proj ⊙ build(inputs))` with respect to
/// `inputs[wrt]`, returning the max relative error.
fn op_err(
    inputs: &[Tensor],
    wrt: usize,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let forward = |probe: &Tensor, grad_wrt: bool, proj: Option<&Tensor>| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let value = if i == wrt { probe.clone() } else { t.clone() };
                tape.leaf(value, grad_wrt && i == wrt)
            })
            .collect();
        let out = build(&mut tape, &vars)?;
        let objective = match proj {
            Some(p) => {
                let pv = tape.leaf(p.clone(), false);
                let weighted = tape.mul(out, pv)?;
                tape.sum(weighted)
            }
            None => tape.sum(out),
        };
        Ok((tape, vars, objective))
    };

    // random projection so symmetric outputs (e.g. softmax rows summing to 1)
    // still exercise the backward pass
    let (tape0, _, out_probe) = forward(&inputs[wrt], false, None)?;
    let out_shape = {
        // out_probe is the sum node; rebuild to read the op output shape
        let _ = (tape0, out_probe);
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let proj = Tensor::uniform(&out_shape, 1.0, rng);

    let (tape, vars, objective) = forward(&inputs[wrt], true, Some(&proj))?;
    let grads = tape.backward(&[(objective, Tensor::scalar(1.0))])?;
    let analytic = grads
        .get(vars[wrt])
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(inputs[wrt].shape()));
    grad_check(
        |probe| {
            let (tape, _, objective) = forward(probe, false, Some(&proj))?;
            Ok(tape.value(objective).data()[0])
        },
        &analytic,
        &inputs[wrt],
        EPSILON,
        None,
    )
}

fn primitive_rows(seeds: &[u64]) -> Result<Vec<SuiteRow>> {
    struct Check {
        name: &'static str,
        inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
        build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
    }
    let u = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::uniform(shape, 1.0, r);
    let checks: Vec<Check> = vec![
        Check {
            name: "conv2d_full",
            inputs: Box::new(move |r| {
                vec![u(&[2, 6, 6], r), u(&[3, 2, 3, 3], r), u(&[3], r)]
            }),
            build: Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, ConvKind::Full)),
        },
        Check {
            name: "conv2d_depthwise",
            inputs: Box::new(move |r| vec![u(&[3, 6, 6], r), u(&[3, 3, 3], r)]),
            build: Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, ConvKind::Depthwise)),
        },
        Check {
            name: "conv2d_shared",
            inputs: Box::new(move |r| vec![u(&[3, 6, 6], r), u(&[1, 3, 3], r)]),
            build: Box::new(|t, v| {
                t.conv2d(v[0], v[1], None, 1, ConvKind::DepthwiseShared)
            }),
        },
        Check {
            name: "add",
            inputs: Box::new(move |r| vec![u(&[2, 4, 4], r), u(&[2, 4, 4], r)]),
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        Check {
            name: "sub",
            inputs: Box::new(move |r| vec![u(&[2, 4, 4], r), u(&[2, 4, 4], r)]),
            build: Box::new(|t, v| t.sub(v[0], v[1])),
        },
        Check {
            name: "mul",
            inputs: Box::new(move |r| vec![u(&[2, 4, 4], r), u(&[2, 4, 4], r)]),
            build: Box::new(|t, v| t.mul(v[0], v[1])),
        },
        Check {
            name: "sigmoid",
            inputs: Box::new(move |r| vec![u(&[2, 4, 4], r)]),
            build: Box::new(|t, v| Ok(t.sigmoid(v[0]))),
        },
        Check {
            name: "tanh",
            inputs: Box::new(move |r| vec![u(&[2, 4, 4], r)]),
            build: Box::new(|t, v| Ok(t.tanh(v[0]))),
        },
        Check {
            name: "square",
            inputs: Box::new(move |r| vec![u(&[2, 4, 4], r)]),
            build: Box::new(|t, v| Ok(t.square(v[0]))),
        },
        Check {
            name: "prelu",
            // inputs pushed away from the kink at 0 so central differences
            // stay on one side
            inputs: Box::new(move |r| {
                let x = Tensor::uniform(&[2, 4, 4], 1.0, r)
                    .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
                vec![x, u(&[2], r)]
            }),
            build: Box::new(|t, v| t.prelu(v[0], v[1])),
        },
        Check {
            name: "channel_scale",
            inputs: Box::new(move |r| vec![u(&[3, 4, 4], r), u(&[3], r)]),
            build: Box::new(|t, v| t.channel_scale(v[0], v[1])),
        },
        Check {
            name: "softmax_channels",
            inputs: Box::new(move |r| vec![u(&[4, 3, 3], r)]),
            build: Box::new(|t, v| t.softmax_channels(v[0])),
        },
        Check {
            name: "down2",
            inputs: Box::new(move |r| vec![u(&[2, 6, 6], r)]),
            build: Box::new(|t, v| t.down2(v[0])),
        },
        Check {
            name: "up2",
            inputs: Box::new(move |r| vec![u(&[2, 3, 3], r)]),
            build: Box::new(|t, v| t.up2(v[0])),
        },
        Check {
            name: "concat_channels",
            inputs: Box::new(move |r| vec![u(&[2, 4, 4], r), u(&[3, 4, 4], r)]),
            build: Box::new(|t, v| t.concat_channels(v)),
        },
        Check {
            name: "repeat",
            inputs: Box::new(move |r| vec![u(&[1], r)]),
            build: Box::new(|t, v| t.repeat(v[0], 5)),
        },
    ];

    let mut rows = Vec::new();
    for check in &checks {
        let mut worst = 0.0f64;
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (check.inputs)(&mut rng);
            for wrt in 0..inputs.len() {
                let err = op_err(&inputs, wrt, &check.build, &mut rng)?;
                worst = worst.max(err);
            }
        }
        rows.push(SuiteRow { name: format!("primitive.{}", check.name), max_err: worst });
    }
    Ok(rows)
}

/// Gradient of a 3-step rollout objective with respect to every cell
/// parameter, for one variant and seed.
fn cell_err(variant: Variant, seed: u64) -> Result<f64> {
    let cfg = ConvLstmConfig {
        in_channels: 2,
        out_channels: 2,
        filter_h: 3,
        filter_w: 3,
        variant,
        state_activation: StateActivation::Prelu,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = ConvLstmCell::new(cfg, &mut rng)?;
    let inputs: Vec<Tensor> =
        (0..3).map(|_| Tensor::uniform(&[2, 4, 4], 1.0, &mut rng)).collect();

    let run = |target: &str, value: &Tensor| -> Result<(f64, Option<Tensor>)> {
        let mut cell = cell.clone();
        for (name, p) in cell.named_params_mut("") {
            if name == target {
                p.value = value.clone();
            }
        }
        let mut tape = Tape::new();
        let vars = CellVars::bind(&cell, &mut tape, "", &|n| n == target);
        let mut state = zero_state(&mut tape, 2, 4, 4);
        let mut acc = None;
        for frame in &inputs {
            let x = tape.leaf(frame.clone(), false);
            state = step(&cell, &mut tape, &vars, x, state)?;
            let sq = tape.square(state.hidden);
            let s = tape.sum(sq);
            acc = Some(match acc {
                None => s,
                Some(prev) => tape.add(prev, s)?,
            });
        }
        let loss = acc.unwrap();
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(&[(loss, Tensor::scalar(1.0))])?;
        let gv = vars
            .named("")
            .iter()
            .find(|(n, _)| n == target)
            .and_then(|(_, v)| grads.get(*v).cloned());
        Ok((value, gv))
    };

    let mut worst = 0.0f64;
    let params: Vec<(String, Tensor)> =
        cell.named_params("").iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
    for (name, value) in &params {
        let (_, analytic) = run(name, value)?;
        let analytic = analytic.unwrap_or_else(|| Tensor::zeros(value.shape()));
        let err = grad_check(
            |probe| run(name, probe).map(|(v, _)| v),
            &analytic,
            value,
            EPSILON,
            None,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn cell_rows(seeds: &[u64]) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for variant in [Variant::Standard, Variant::DepthwiseSeparable, Variant::DepthwiseShared] {
        let mut worst = 0.0f64;
        for &seed in seeds {
            worst = worst.max(cell_err(variant, seed)?);
        }
        rows.push(SuiteRow { name: format!("cell.{}", variant.label()), max_err: worst });
    }
    Ok(rows)
}

fn toy_labels(frames: usize, height: usize, width: usize, classes: u8, seed: u64) -> LabelVolume {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = LabelVolume::new(frames, height, width, 0);
    for v in labels.data_mut() {
        *v = rng.gen_range(0..classes);
    }
    labels
}

/// End-to-end gradient through a full model and the total loss, sampled at
/// `targets` parameter tensors.
fn model_err(spec: &ModelSpec, targets: &[&str], seed: u64) -> Result<f64> {
    let model = Model::build(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let frames: Vec<Tensor> =
        (0..2).map(|_| Tensor::uniform(&[3, 8, 8], 0.5, &mut rng)).collect();
    let labels = toy_labels(2, 8, 8, spec.num_classes as u8, seed.wrapping_add(1));
    let config = LossConfig::default();

    // masks frozen from the unperturbed model: a finite-difference probe must
    // not flip an argmax and change the objective discontinuously
    let (_, _, _, base_volume) = model.clone().forward_sequence_train(&frames, &|_| false)?;
    let masks = compute_masks(&base_volume, &labels)?;

    let run = |target: &str, value: &Tensor| -> Result<(f64, Option<Tensor>)> {
        let mut m = model.clone();
        for (name, p) in m.named_params_mut() {
            if name == target {
                p.value = value.clone();
            }
        }
        let (tape, vars, prob_vars, volume) =
            m.forward_sequence_train(&frames, &|n| n == target)?;
        let (components, grad) = total_loss_grad(&volume, &labels, &config, Some(&masks))?;
        let seeds: Vec<(Var, Tensor)> =
            prob_vars.iter().enumerate().map(|(t, &v)| (v, grad.frame_tensor(t))).collect();
        let grads = tape.backward(&seeds)?;
        let gw = m
            .bound_names(&vars)
            .iter()
            .find(|(n, _)| n == target)
            .and_then(|(_, v)| grads.get(*v).cloned());
        Ok((components.total, gw))
    };

    let mut worst = 0.0f64;
    for target in targets {
        let value = model
            .named_params()
            .iter()
            .find(|(n, _)| n == target)
            .map(|(_, p)| p.value.clone())
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no parameter named '{}'", target))
            })?;
        let (_, analytic) = run(target, &value)?;
        let analytic = analytic.unwrap_or_else(|| Tensor::zeros(value.shape()));
        let entries: Vec<usize> = (0..value.len()).step_by(7).collect();
        let err = grad_check(
            |probe| run(target, probe).map(|(v, _)| v),
            &analytic,
            &value,
            EPSILON,
            Some(&entries),
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn model_rows(seeds: &[u64]) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();

    let mut ssnet = ModelSpec::new(Architecture::SsNet, 3);
    ssnet.base_channels = 4;
    let mut vssnet = ModelSpec::new(Architecture::VssNet, 3);
    vssnet.base_channels = 4;
    let mut esp = ModelSpec::new(Architecture::MiniEsp, 3);
    esp.lstm_position = LstmPosition::L1b;

    let grid: [(&str, &ModelSpec, &[&str]); 3] = [
        ("model.SSNet", &ssnet, &["conv1.weight", "conv4.weight", "proj.bias"]),
        ("model.VSSNet", &vssnet, &["conv1.weight", "lstm.W_hi", "lstm.b_f", "fuse.gain", "proj.weight"]),
        ("model.MiniEsp(L1b)", &esp, &["stem.weight", "esp2_1.branch2.weight", "lstm.W_xi"]),
    ];
    for (name, spec, targets) in grid {
        let mut worst = 0.0f64;
        for &seed in seeds {
            worst = worst.max(model_err(spec, targets, seed)?);
        }
        rows.push(SuiteRow { name: name.into(), max_err: worst });
    }
    Ok(rows)
}

/// Analytic loss gradient vs central differences on the probability volume,
/// with the argmax-dependent masks frozen on both sides.
fn loss_err(seed: u64, config: &LossConfig) -> Result<f64> {
    let (frames, height, width, classes) = (3usize, 6usize, 6usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::uniform(&[frames * height * width * classes], 1.5, &mut rng);
    let mut data = logits.data().to_vec();
    for pixel in data.chunks_mut(classes) {
        let m = pixel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in pixel.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in pixel.iter_mut() {
            *v /= z;
        }
    }
    let preds = PredictionVolume::from_vec(frames, height, width, classes, data)?;
    let labels = toy_labels(frames, height, width, classes as u8, seed.wrapping_add(7));
    let masks = compute_masks(&preds, &labels)?;

    let (_, grad) = total_loss_grad(&preds, &labels, config, Some(&masks))?;
    let analytic = Tensor::from_vec(&[grad.data().len()], grad.data().to_vec())?;
    let x = Tensor::from_vec(&[preds.data().len()], preds.data().to_vec())?;
    grad_check(
        |probe| {
            let p = PredictionVolume::from_vec(
                frames,
                height,
                width,
                classes,
                probe.data().to_vec(),
            )?;
            let (components, _) = total_loss_grad(&p, &labels, config, Some(&masks))?;
            Ok(components.total)
        },
        &analytic,
        &x,
        EPSILON,
        None,
    )
}

fn loss_rows(seeds: &[u64]) -> Result<Vec<SuiteRow>> {
    use crate::losses::Difference;
    let mut rows = Vec::new();
    let configs = [
        ("loss.total(sq_diff)", LossConfig::default()),
        (
            "loss.total(abs_diff)",
            LossConfig { difference: Difference::Absolute, ..Default::default() },
        ),
        ("loss.ce_only", LossConfig { lambda_incons: 0.0, ..Default::default() }),
    ];
    for (name, config) in configs {
        let mut worst = 0.0f64;
        for &seed in seeds {
            worst = worst.max(loss_err(seed, &config)?);
        }
        rows.push(SuiteRow { name: name.into(), max_err: worst });
    }
    Ok(rows)
}

/// Harness self-test: a deliberately sign-flipped analytic gradient must be
/// reported as a large error.
pub fn sign_flip_self_test() -> Result<SuiteRow> {
    let x = Tensor::filled(&[4], 0.75);
    let wrong = x.map(|v| -2.0 * v);
    let err = grad_check(|t| Ok(t.iter().map(|v| v * v).sum()), &wrong, &x, EPSILON, None)?;
    Ok(SuiteRow { name: "self_test.sign_flip_detected".into(), max_err: err })
}

pub fn run_suite(scope: Scope, seeds: &[u64]) -> Result<Vec<SuiteRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("gradcheck needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    if matches!(scope, Scope::Primitives | Scope::All) {
        rows.extend(primitive_rows(seeds)?);
    }
    if matches!(scope, Scope::Cell | Scope::All) {
        rows.extend(cell_rows(seeds)?);
    }
    if matches!(scope, Scope::Model | Scope::All) {
        rows.extend(model_rows(seeds)?);
    }
    if matches!(scope, Scope::Loss | Scope::All) {
        rows.extend(loss_rows(seeds)?);
    }
    Ok(rows)
}
