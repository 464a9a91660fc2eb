//! Property tests of the differentiable ops against independent oracles.

use pefnet::autograd::{BatchNormConfig, BatchNormStats, Mode, Tape};
use pefnet::blocks::{mkcnn, MkcnnParams};
use pefnet::rng::derive_rng;
use pefnet::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(seed: u64, tag: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = derive_rng(seed, &[tag]);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Plain nested-loop cross-correlation used as the reference.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, ci, h, wd) = x.dims4().unwrap();
    let (co, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = (y * stride + i) as isize - pad as isize;
                                let sx = (xx * stride + j) as isize - pad as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += x.data()[((n * ci + c) * h + sy as usize) * wd + sx as usize]
                                        * w.data()[((o * ci + c) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out.data_mut()[((n * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()).unwrap(), t.constant(w.clone()).unwrap());
    let y = t.conv2d(xv, wv, None, stride, pad).unwrap();
    t.value(y).unwrap().clone()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn transpose_is_adjoint_of_conv(
        seed in any::<u64>(),
        b in 1usize..3, ci in 1usize..4, co in 1usize..4,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, steps in 1usize..4,
    ) {
        prop_assume!(pad < k);
        // pick h so the forward output size is integral and round-trips
        let h = (steps - 1) * stride + k - 2 * pad;
        prop_assume!(h >= 1);
        let x = rand_tensor(seed, 1, &[b, ci, h, h]);
        let w = rand_tensor(seed, 2, &[co, ci, k, k]);
        let fwd = run_conv(&x, &w, stride, pad);
        let y = rand_tensor(seed, 3, fwd.shape());
        let mut t = Tape::new();
        let (yv, wv) = (t.constant(y.clone()).unwrap(), t.constant(w.clone()).unwrap());
        let back = t.conv_transpose2d(yv, wv, None, stride, pad).unwrap();
        let back = t.value(back).unwrap().clone();
        prop_assert_eq!(back.shape(), x.shape());
        let lhs = fwd.dot(&y).unwrap();
        let rhs = x.dot(&back).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-4, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn conv_matches_loop_oracle(
        seed in any::<u64>(), ci in 1usize..4, co in 1usize..4,
        k in 1usize..4, stride in 1usize..3, h in 3usize..6,
    ) {
        let pad = k / 2;
        prop_assume!((h + 2 * pad - k) % stride == 0);
        let x = rand_tensor(seed, 1, &[2, ci, h, h]);
        let w = rand_tensor(seed, 2, &[co, ci, k, k]);
        prop_assert!(max_abs_diff(&run_conv(&x, &w, stride, pad), &conv_oracle(&x, &w, stride, pad)) < 1e-12);
    }

    #[test]
    fn same_padding_preserves_shape(k in (0usize..4).prop_map(|i| 2 * i + 1), h in 1usize..9, w in 1usize..9) {
        let x = Tensor::<f64>::ones(&[1, 2, h, w]);
        let wt = Tensor::<f64>::ones(&[3, 2, k, k]);
        let y = run_conv(&x, &wt, 1, k / 2);
        prop_assert_eq!(y.shape(), &[1, 3, h, w]);
    }

    #[test]
    fn depthwise_equals_grouped_conv(seed in any::<u64>(), c in 1usize..5, k in (0usize..3).prop_map(|i| 2 * i + 1), h in 2usize..6) {
        let x = rand_tensor(seed, 1, &[2, c, h, h]);
        let w = rand_tensor(seed, 2, &[c, 1, k, k]);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()).unwrap(), t.constant(w.clone()).unwrap());
        let y = t.depthwise_conv2d(xv, wv, None, k / 2).unwrap();
        let dw = t.value(y).unwrap().clone();
        // groups = channels: a dense kernel that is zero off the diagonal
        let dense = Tensor::from_fn(&[c, c, k, k], |i| {
            let (o, rest) = (i / (c * k * k), i % (c * k * k));
            let (ci, tap) = (rest / (k * k), rest % (k * k));
            if o == ci { w.data()[o * k * k + tap] } else { 0.0 }
        });
        prop_assert!(max_abs_diff(&dw, &conv_oracle(&x, &dense, 1, k / 2)) < 1e-12);
    }

    #[test]
    fn batch_norm_normalizes_each_channel(seed in any::<u64>(), b in 1usize..4, c in 1usize..4, h in 2usize..5) {
        let mut x = rand_tensor(seed, 1, &[b, c, h, h]);
        // channel-dependent offset and spread
        let plane = h * h;
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = *v * (1.0 + ch as f64) + 3.0 * ch as f64;
        }
        let mut t = Tape::new();
        let xv = t.constant(x).unwrap();
        let g = t.constant(Tensor::ones(&[c])).unwrap();
        let be = t.constant(Tensor::zeros(&[c])).unwrap();
        let mut stats = BatchNormStats::new(c);
        let y = t.batch_norm(xv, g, be, &mut stats, Mode::Train, BatchNormConfig::default()).unwrap();
        let y = t.value(y).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|n| {
                let start = (n * c + ch) * plane;
                y.data()[start..start + plane].to_vec()
            }).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3, "var {}", var);
        }
    }

    #[test]
    fn mkcnn_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, bcoef in -2.0f64..2.0) {
        let x1 = rand_tensor(seed, 1, &[1, 2, 5, 5]);
        let x2 = rand_tensor(seed, 2, &[1, 2, 5, 5]);
        let w1 = rand_tensor(seed, 3, &[3, 2, 1, 1]);
        let w3 = rand_tensor(seed, 4, &[3, 2, 3, 3]);
        let run = |x: Tensor<f64>| {
            let mut t = Tape::new();
            let xv = t.constant(x).unwrap();
            let p = MkcnnParams { branches: vec![(1, t.constant(w1.clone()).unwrap()), (3, t.constant(w3.clone()).unwrap())] };
            let y = mkcnn(&mut t, xv, &p).unwrap();
            t.value(y).unwrap().clone()
        };
        let mix = Tensor::from_fn(&[1, 2, 5, 5], |i| a * x1.data()[i] + bcoef * x2.data()[i]);
        let (y1, y2) = (run(x1), run(x2));
        let want = Tensor::from_fn(y1.shape(), |i| a * y1.data()[i] + bcoef * y2.data()[i]);
        prop_assert!(max_abs_diff(&run(mix), &want) < 1e-12);
    }
}

#[test]
fn conv_weight_gradient_counts_placements() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
    let w = t.param(Tensor::ones(&[1, 1, 3, 3])).unwrap();
    let y = t.conv2d(x, w, None, 1, 1).unwrap();
    let l = t.sum(y).unwrap();
    t.backward(l).unwrap();
    // tap (i, j) sees an in-bounds pixel at 2 or 3 positions per axis
    let per_axis = [2.0, 3.0, 2.0];
    let want: Vec<f64> = (0..9).map(|i| per_axis[i / 3] * per_axis[i % 3]).collect();
    assert_eq!(t.grad(w).unwrap().data(), want.as_slice());
}

#[test]
fn gradients_are_reset_between_backward_calls() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
    let unused = t.param(Tensor::ones(&[3])).unwrap();
    let l = t.sum(x).unwrap();
    t.backward(l).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(t.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
}
