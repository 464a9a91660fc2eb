//! Positional embedding, MPE block and ConvNeXt block properties.

use std::collections::HashSet;

use pefnet::autograd::{BatchNormConfig, BatchNormStats, Mode, Tape, Var};
use pefnet::blocks::{
    convnext_block, mkcnn, mpe_block, positional_embedding_2d, ConvNeXtBlockParams, MkcnnParams, MpeParams, PeConfig,
};
use pefnet::rng::derive_rng;
use pefnet::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(seed: u64, tag: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = derive_rng(seed, &[tag]);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn pe(c: usize, h: usize, w: usize) -> Tensor<f64> {
    positional_embedding_2d(c, h, w, &PeConfig::default()).unwrap()
}

#[test]
fn pe_entries_are_bounded() {
    for (c, h, w) in [(4, 1, 1), (16, 32, 32), (64, 8, 5), (128, 16, 16)] {
        assert!(pe(c, h, w).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn pe_origin_is_exactly_sine_zero_cosine_one() {
    let (c, h, w) = (16, 6, 7);
    let t = pe(c, h, w);
    let plane = h * w;
    for ch in 0..c {
        let parity = (ch % (c / 2)) % 2;
        let expected = if parity == 0 { 0.0 } else { 1.0 };
        // rows encode y, so y = 0 along a whole row; likewise x = 0 for columns
        let cells: Vec<usize> = if ch < c / 2 {
            (0..w).collect()
        } else {
            (0..h).map(|y| y * w).collect()
        };
        for i in cells {
            assert_eq!(t.data()[ch * plane + i], expected, "channel {ch}");
        }
    }
}

#[test]
fn pe_scalar_oracle() {
    // half width 2: channel 0 is sin(y / 10000^0) = sin(y)
    let t = pe(4, 2, 1);
    assert!((t.data()[1] - 1f64.sin()).abs() < 1e-12);
    assert!((t.data()[1] - 0.841_471).abs() < 1e-6);
}

#[test]
fn pe_positions_are_distinct_on_32x32() {
    let (c, h, w) = (16, 32, 32);
    let t = pe(c, h, w);
    let mut seen = HashSet::new();
    for p in 0..h * w {
        let v: Vec<u64> = (0..c).map(|ch| t.data()[ch * h * w + p].to_bits()).collect();
        assert!(seen.insert(v), "position {p} repeats an earlier embedding");
    }
    assert_eq!(seen.len(), h * w);
}

#[test]
fn pe_is_bit_identical_across_calls() {
    let a = pe(32, 17, 9);
    let b = pe(32, 17, 9);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let a32 = positional_embedding_2d::<f32>(32, 17, 9, &PeConfig::default()).unwrap();
    let b32 = positional_embedding_2d::<f32>(32, 17, 9, &PeConfig::default()).unwrap();
    assert_eq!(a32, b32);
}

struct Mpe {
    tape: Tape<f64>,
    params: MpeParams,
}

fn mpe_setup(
    kernels: &[usize],
    ci: usize,
    co: usize,
    weights: impl Fn(usize, &[usize]) -> Tensor<f64>,
    gamma: f64,
    beta: f64,
) -> Mpe {
    let mut tape = Tape::new();
    let branches = kernels
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, tape.param(weights(i, &[co, ci, k, k])).unwrap()))
        .collect();
    let bn_gamma = tape.param(Tensor::full(&[co], gamma)).unwrap();
    let bn_beta = tape.param(Tensor::full(&[co], beta)).unwrap();
    Mpe {
        tape,
        params: MpeParams {
            mkcnn: MkcnnParams { branches },
            bn_gamma,
            bn_beta,
        },
    }
}

#[test]
fn mpe_with_silenced_branches_is_exactly_the_mask() {
    for mode in [Mode::Train, Mode::Eval] {
        let mut m = mpe_setup(&[1, 3, 5, 7], 3, 8, |_, s| Tensor::zeros(s), 0.0, 0.0);
        let x = m.tape.constant(rand_tensor(1, 1, &[2, 3, 6, 5])).unwrap();
        let mut stats = BatchNormStats::new(8);
        stats.tracked = 1;
        let y = mpe_block(
            &mut m.tape,
            x,
            &m.params,
            &mut stats,
            mode,
            BatchNormConfig::default(),
            &PeConfig::default(),
        )
        .unwrap();
        let want = pe(8, 6, 5).repeat_batch(2).unwrap();
        let got = m.tape.value(y).unwrap();
        assert!(got
            .data()
            .iter()
            .zip(want.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn mpe_shape_contract() {
    let mut m = mpe_setup(&[1, 3], 5, 12, |i, s| rand_tensor(9, i as u64, s), 1.0, 0.0);
    let x = m.tape.constant(rand_tensor(2, 2, &[3, 5, 4, 7])).unwrap();
    let mut stats = BatchNormStats::new(12);
    let y = mpe_block(
        &mut m.tape,
        x,
        &m.params,
        &mut stats,
        Mode::Train,
        BatchNormConfig::default(),
        &PeConfig::default(),
    )
    .unwrap();
    assert_eq!(m.tape.value(y).unwrap().shape(), &[3, 12, 4, 7]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mpe_eval_equals_component_composition(seed in any::<u64>(), gamma in -2.0f64..2.0, beta in -1.0f64..1.0) {
        let (ci, co, h, w) = (3, 8, 5, 6);
        let ws = [rand_tensor(seed, 10, &[co, ci, 1, 1]), rand_tensor(seed, 11, &[co, ci, 3, 3])];
        let mut m = mpe_setup(&[1, 3], ci, co, |i, _| ws[i].clone(), gamma, beta);
        let x = rand_tensor(seed, 1, &[2, ci, h, w]);
        let xv = m.tape.constant(x.clone()).unwrap();
        let mut stats = BatchNormStats::new(co);
        stats.mean = (0..co).map(|c| 0.1 * c as f64).collect();
        stats.var = (0..co).map(|c| 0.5 + c as f64).collect();
        stats.tracked = 3;
        let cfg = BatchNormConfig::default();
        let y = mpe_block(&mut m.tape, xv, &m.params, &mut stats.clone(), Mode::Eval, cfg, &PeConfig::default()).unwrap();
        let got = m.tape.value(y).unwrap().clone();

        // independent branch convs, summed, then eval BN, then the mask
        let mut t = Tape::<f64>::new();
        let xc = t.constant(x).unwrap();
        let mut sum = Tensor::<f64>::zeros(&[2, co, h, w]);
        for (k, wt) in [1usize, 3].iter().zip(&ws) {
            let wv = t.constant(wt.clone()).unwrap();
            let b = t.conv2d(xc, wv, None, 1, k / 2).unwrap();
            for (s, v) in sum.data_mut().iter_mut().zip(t.value(b).unwrap().data()) {
                *s += v;
            }
        }
        let mask = pe(co, h, w);
        let plane = h * w;
        for (i, g) in got.data().iter().enumerate() {
            let c = (i / plane) % co;
            let bn = (sum.data()[i] - stats.mean[c]) / (stats.var[c] + cfg.eps).sqrt() * gamma + beta;
            let want = bn + mask.data()[c * plane + i % plane];
            prop_assert!((g - want).abs() < 1e-10, "{} vs {}", g, want);
        }
    }

    #[test]
    fn mpe_difference_does_not_depend_on_mask(seed in any::<u64>()) {
        let run = |x: Tensor<f64>, base: f64| {
            let mut m = mpe_setup(&[1, 3], 2, 4, |i, s| rand_tensor(seed, 20 + i as u64, s), 1.3, 0.2);
            let xv = m.tape.constant(x).unwrap();
            let mut stats = BatchNormStats::new(4);
            stats.tracked = 1;
            let y = mpe_block(&mut m.tape, xv, &m.params, &mut stats, Mode::Eval, BatchNormConfig::default(), &PeConfig { base }).unwrap();
            m.tape.value(y).unwrap().clone()
        };
        let (x1, x2) = (rand_tensor(seed, 1, &[1, 2, 4, 4]), rand_tensor(seed, 2, &[1, 2, 4, 4]));
        let d_std: Vec<f64> = run(x1.clone(), 10_000.0).data().iter().zip(run(x2.clone(), 10_000.0).data()).map(|(a, b)| a - b).collect();
        let d_alt: Vec<f64> = run(x1, 7.0).data().iter().zip(run(x2, 7.0).data()).map(|(a, b)| a - b).collect();
        for (a, b) in d_std.iter().zip(&d_alt) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn convnext_with_zero_layer_scale_is_identity(seed in any::<u64>(), c in (1usize..4).prop_map(|i| 4 * i)) {
        let mut t = Tape::<f64>::new();
        let mut p = |tag: u64, shape: &[usize]| -> Var { t.param(rand_tensor(seed, tag, shape)).unwrap() };
        let params = ConvNeXtBlockParams {
            dw_weight: p(1, &[c, 1, 7, 7]),
            norm_gamma: p(2, &[c]),
            norm_beta: p(3, &[c]),
            expand_weight: p(4, &[4 * c, c, 1, 1]),
            expand_bias: p(5, &[4 * c]),
            project_weight: p(6, &[c, 4 * c, 1, 1]),
            project_bias: p(7, &[c]),
            layer_scale: t.param(Tensor::zeros(&[c])).unwrap(),
        };
        let x = rand_tensor(seed, 0, &[2, c, 8, 8]);
        let xv = t.constant(x.clone()).unwrap();
        let y = convnext_block(&mut t, xv, &params).unwrap();
        prop_assert_eq!(t.value(y).unwrap(), &x);
    }
}

#[test]
fn mkcnn_identity_branch_passes_input_through() {
    let mut t = Tape::<f64>::new();
    let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let w = t.constant(eye).unwrap();
    let x = rand_tensor(5, 5, &[1, 3, 4, 4]);
    let xv = t.constant(x.clone()).unwrap();
    let y = mkcnn(&mut t, xv, &MkcnnParams { branches: vec![(1, w)] }).unwrap();
    assert_eq!(t.value(y).unwrap(), &x);
}

#[test]
fn worked_op_examples() {
    let mut t = Tape::<f64>::new();

    // 3x3 ones, same padding: each output counts the in-bounds taps
    let x = t.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
    let w = t.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
    let y = t.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(
        t.value(y).unwrap().data(),
        &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
    );

    // stride-2 transpose with a 2x2 ones kernel expands each pixel into a block
    let x = t
        .constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
        .unwrap();
    let w = t.constant(Tensor::ones(&[1, 1, 2, 2])).unwrap();
    let y = t.conv_transpose2d(x, w, None, 2, 0).unwrap();
    #[rustfmt::skip]
    let want = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(t.value(y).unwrap().data(), &want);

    // two-value channel normalizes to -1, +1
    let x = t.constant(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap()).unwrap();
    let g = t.constant(Tensor::ones(&[1])).unwrap();
    let b = t.constant(Tensor::zeros(&[1])).unwrap();
    let mut stats = BatchNormStats::new(1);
    let y = t
        .batch_norm(x, g, b, &mut stats, Mode::Train, BatchNormConfig::default())
        .unwrap();
    let v = t.value(y).unwrap().data().to_vec();
    assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);

    let x = t.constant(Tensor::new(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap()).unwrap();
    let g = t.constant(Tensor::ones(&[2])).unwrap();
    let b = t.constant(Tensor::zeros(&[2])).unwrap();
    let y = t.layer_norm_channels(x, g, b, 1e-6).unwrap();
    let v = t.value(y).unwrap().data().to_vec();
    assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);

    let x = t.constant(Tensor::new(&[3], vec![0.0, 1.0, 10.0]).unwrap()).unwrap();
    let y = t.gelu(x).unwrap();
    let v = t.value(y).unwrap().data().to_vec();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 0.841_345).abs() < 1e-6);
    assert!((v[2] - 10.0).abs() < 1e-6);
}
