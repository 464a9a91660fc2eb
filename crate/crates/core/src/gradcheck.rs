//! Central finite-difference verification of every differentiable op and of
//! the whole network, re-executed in f64.
//!
//! Each op check reduces the op output to `sum(op(inputs) * r)` for a fixed
//! random `r` and compares the analytic gradient of every input element with
//! `(L(x + h) - L(x - h)) / 2h`.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormConfig, BatchNormStats, Mode, Tape, Var};
use crate::blocks::{self, ConvNeXtBlockParams, MkcnnParams, MpeParams, PeConfig};
use crate::config::{Fusion, ModelConfig, Preset};
use crate::error::Result;
use crate::metrics::{jaccard_loss, LossConfig};
use crate::network::Model;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Floor of the relative-error denominator.
pub const ABS_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, ABS_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{:<5} {:<28} n={:<5} max_rel_err={:.3e} (tol {:.0e}) {:.2}s",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_error,
            self.tolerance,
            self.elapsed.as_secs_f64()
        )
    }
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Scalar `sum(build(inputs) * r)` for the given input values.
fn reduced(build: &Build, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y = build(&mut tape, &vars)?;
    tape.value(y)?.dot(r)
}

/// Check every element of every input of one op.
pub fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: &Build, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y = build(&mut tape, &vars)?;
    let r = randn(rng, tape.value(y)?.shape());
    let rv = tape.constant(r.clone())?;
    let prod = tape.mul(y, rv)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.clone();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v)?.clone();
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let up = reduced(build, &probe, &r)?;
            probe[k].data_mut()[i] = orig - STEP;
            let down = reduced(build, &probe, &r)?;
            probe[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], fd));
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        checked,
        max_rel_error: worst,
        tolerance: OP_TOLERANCE,
        elapsed: start.elapsed(),
    })
}

/// Per-op checks on random small tensors (extents <= 5).
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = derive_rng(seed, &[0x4f50]);
    let bn = BatchNormConfig::default();
    let mut out = Vec::new();
    let mut run = |name: &str, shapes: &[&[usize]], build: &Build, rng: &mut ChaCha8Rng| -> Result<()> {
        let inputs = shapes.iter().map(|s| randn(rng, s)).collect();
        out.push(check_op(name, inputs, build, rng)?);
        Ok(())
    };

    run(
        "conv2d",
        &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        &mut rng,
    )?;
    run(
        "conv2d stride 2",
        &[&[1, 2, 5, 5], &[3, 2, 3, 3]],
        &|t, v| t.conv2d(v[0], v[1], None, 2, 0),
        &mut rng,
    )?;
    run(
        "conv2d 1x1",
        &[&[2, 4, 3, 3], &[5, 4, 1, 1], &[5]],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
        &mut rng,
    )?;
    run(
        "depthwise_conv2d",
        &[&[2, 3, 5, 5], &[3, 1, 3, 3], &[3]],
        &|t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), 1),
        &mut rng,
    )?;
    run(
        "conv_transpose2d",
        &[&[2, 3, 3, 3], &[3, 2, 2, 2], &[2]],
        &|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0),
        &mut rng,
    )?;
    run(
        "conv_transpose2d overlap",
        &[&[1, 2, 3, 3], &[2, 3, 3, 3]],
        &|t, v| t.conv_transpose2d(v[0], v[1], None, 2, 1),
        &mut rng,
    )?;
    run(
        "batch_norm train",
        &[&[3, 2, 3, 3], &[2], &[2]],
        &|t, v| {
            let mut stats = BatchNormStats::new(2);
            t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train, bn)
        },
        &mut rng,
    )?;
    run(
        "batch_norm eval",
        &[&[2, 2, 3, 3], &[2], &[2]],
        &|t, v| {
            let mut stats = BatchNormStats {
                mean: vec![0.1, -0.2],
                var: vec![0.7, 1.3],
                tracked: 1,
            };
            t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Eval, bn)
        },
        &mut rng,
    )?;
    run(
        "layer_norm_channels",
        &[&[2, 4, 3, 3], &[4], &[4]],
        &|t, v| t.layer_norm_channels(v[0], v[1], v[2], 1e-6),
        &mut rng,
    )?;
    run("gelu", &[&[2, 3, 4, 4]], &|t, v| t.gelu(v[0]), &mut rng)?;
    run("sigmoid", &[&[2, 3, 4, 4]], &|t, v| t.sigmoid(v[0]), &mut rng)?;
    run(
        "add",
        &[&[2, 3, 3, 3], &[2, 3, 3, 3]],
        &|t, v| t.add(v[0], v[1]),
        &mut rng,
    )?;
    run(
        "mul",
        &[&[2, 3, 3, 3], &[2, 3, 3, 3]],
        &|t, v| t.mul(v[0], v[1]),
        &mut rng,
    )?;
    run("scale", &[&[2, 3, 3, 3]], &|t, v| t.scale(v[0], -1.7), &mut rng)?;
    run(
        "channel_scale",
        &[&[2, 3, 3, 3], &[3]],
        &|t, v| t.channel_scale(v[0], v[1]),
        &mut rng,
    )?;
    run(
        "concat_channels",
        &[&[2, 2, 3, 3], &[2, 3, 3, 3]],
        &|t, v| t.concat_channels(v[0], v[1]),
        &mut rng,
    )?;
    run("sum", &[&[2, 3, 3, 3]], &|t, v| t.sum(v[0]), &mut rng)?;

    for (name, per_image) in [("jaccard_loss batch", false), ("jaccard_loss per-image", true)] {
        let target = Tensor::from_fn(&[2, 1, 4, 4], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let logits = randn(&mut rng, &[2, 1, 4, 4]);
        let cfg = LossConfig { alpha: 1.0, per_image };
        // probabilities via sigmoid keep the FD probe inside (0, 1)
        out.push(check_op(
            name,
            vec![logits],
            &|t, v| {
                let p = t.sigmoid(v[0])?;
                jaccard_loss(t, p, &target, &cfg)
            },
            &mut rng,
        )?);
    }

    let mut blocks = |name: &str, shapes: &[&[usize]], build: &Build, rng: &mut ChaCha8Rng| -> Result<()> {
        let mut inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(rng, s)).collect();
        // keep norm gammas and the layer scale away from zero
        for t in inputs.iter_mut().filter(|t| t.rank() == 1) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.5 + v.abs());
        }
        out.push(check_op(name, inputs, build, rng)?);
        Ok(())
    };
    blocks(
        "convnext_block",
        &[
            &[1, 4, 4, 4],
            &[4, 1, 7, 7],
            &[4],
            &[4],
            &[16, 4, 1, 1],
            &[16],
            &[4, 16, 1, 1],
            &[4],
            &[4],
        ],
        &|t, v| {
            let p = ConvNeXtBlockParams {
                dw_weight: v[1],
                norm_gamma: v[2],
                norm_beta: v[3],
                expand_weight: v[4],
                expand_bias: v[5],
                project_weight: v[6],
                project_bias: v[7],
                layer_scale: v[8],
            };
            blocks::convnext_block(t, v[0], &p)
        },
        &mut rng,
    )?;
    blocks(
        "mpe_block",
        &[&[2, 4, 4, 4], &[4, 4, 1, 1], &[4, 4, 3, 3], &[4], &[4]],
        &|t, v| {
            let p = MpeParams {
                mkcnn: MkcnnParams {
                    branches: vec![(1, v[1]), (3, v[2])],
                },
                bn_gamma: v[3],
                bn_beta: v[4],
            };
            let mut stats = BatchNormStats::new(4);
            blocks::mpe_block(t, v[0], &p, &mut stats, Mode::Train, bn, &PeConfig::default())
        },
        &mut rng,
    )?;
    Ok(out)
}

/// Reduced Toy network used by the end-to-end check.
pub fn network_check_config(fusion: Fusion) -> ModelConfig {
    let mut cfg = ModelConfig::preset(Preset::Toy);
    cfg.stage_widths = [8, 16, 32, 64];
    cfg.head_channels = 8;
    cfg.fusion = fusion;
    cfg
}

/// Jaccard loss of a Toy model on a `1x3x32x32` input against analytic
/// gradients of `samples` randomly chosen parameter elements.
///
/// Parameters are first perturbed away from their initial values (layer
/// scales, norm affines and biases) so that every path carries gradient.
pub fn network_check(seed: u64, samples: usize, fusion: Fusion) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = derive_rng(seed, &[0x004e_4554]);
    let cfg = network_check_config(fusion);
    let mut model = Model::<f64>::build(cfg, seed)?;
    for (name, t) in model.params.iter_mut() {
        if name.ends_with("layer_scale") || name.ends_with("gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else if name.ends_with("bias") || name.ends_with("beta") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let x = randn(&mut rng, &[1, 3, 32, 32]);
    let target = Tensor::from_fn(&[1, 1, 32, 32], |i| {
        let (r, c) = ((i / 32) as f64 - 14.0, (i % 32) as f64 - 17.0);
        if r * r + c * c < 64.0 {
            1.0
        } else {
            0.0
        }
    });
    let loss_cfg = LossConfig::default();

    let loss_of = |m: &mut Model<f64>| -> Result<(f64, Tape<f64>, Var, crate::params::Binding)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let (logits, vars) = m.forward_on(&mut tape, xv, Mode::Train)?;
        let p = tape.sigmoid(logits)?;
        let l = jaccard_loss(&mut tape, p, &target, &loss_cfg)?;
        Ok((tape.value(l)?.item()?, tape, l, vars))
    };

    let (_, mut tape, l, vars) = loss_of(&mut model)?;
    tape.backward(l)?;

    // every tensor gets at least one probe; the rest are spread by size
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut probes: Vec<(usize, usize)> = Vec::new();
    for (k, n) in names.iter().enumerate() {
        let len = model.params.get(n)?.len();
        probes.push((k, rng.random_range(0..len)));
    }
    let total: usize = names.iter().map(|n| model.params.get(n).map_or(0, Tensor::len)).sum();
    let extra = samples.saturating_sub(probes.len());
    for flat in sample(&mut rng, total, extra.min(total)).into_iter() {
        let mut rem = flat;
        for (k, n) in names.iter().enumerate() {
            let len = model.params.get(n)?.len();
            if rem < len {
                probes.push((k, rem));
                break;
            }
            rem -= len;
        }
    }

    let mut worst: f64 = 0.0;
    for &(k, i) in &probes {
        let name = &names[k];
        let analytic = tape.grad(vars.get(name)?)?.data()[i];
        let orig = model.params.get(name)?.data()[i];
        model.params.get_mut(name)?.data_mut()[i] = orig + STEP;
        let up = loss_of(&mut model)?.0;
        model.params.get_mut(name)?.data_mut()[i] = orig - STEP;
        let down = loss_of(&mut model)?.0;
        model.params.get_mut(name)?.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic, fd));
    }
    Ok(CheckResult {
        name: format!("network ({fusion})"),
        checked: probes.len(),
        max_rel_error: worst,
        tolerance: NETWORK_TOLERANCE,
        elapsed: start.elapsed(),
    })
}

/// The full suite: all ops, then the network with `samples` probes.
pub fn full_suite(seed: u64, samples: usize) -> Result<Vec<CheckResult>> {
    let mut results = op_suite(seed)?;
    results.push(network_check(seed, samples, Fusion::Add)?);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = derive_rng(0, &[]);
        // mul by a constant that the tape does not know about
        let hidden = Tensor::full(&[2, 2], 2.0);
        let r = check_op(
            "rigged",
            vec![randn(&mut rng, &[2, 2])],
            &|t, v| {
                let c = t.constant(hidden.clone())?;
                let y = t.mul(v[0], c)?;
                // detach by round-tripping through a constant
                let val = t.value(y)?.clone();
                let z = t.constant(val)?;
                t.add(z, v[0])
            },
            &mut rng,
        )
        .unwrap();
        assert!(!r.passed(), "{}", r.line());
    }
}
