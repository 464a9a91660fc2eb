//! IoU / Dice identities and the Jaccard loss against pixel-count oracles.

use pefnet::autograd::Tape;
use pefnet::metrics::{dice, iou, jaccard_loss, jaccard_loss_value, LossConfig};
use pefnet::rng::derive_rng;
use pefnet::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn mask(bits: &[u8]) -> Tensor<f64> {
    Tensor::new(&[bits.len()], bits.iter().map(|&b| f64::from(b)).collect()).unwrap()
}

fn random_mask(seed: u64, tag: u64, density: f64) -> Tensor<f64> {
    let mut rng = derive_rng(seed, &[tag]);
    Tensor::from_fn(
        &[1, 1, 16, 16],
        |_| if rng.random::<f64>() < density { 1.0 } else { 0.0 },
    )
}

fn loss(target: &Tensor<f64>, pred: &Tensor<f64>, alpha: f64) -> f64 {
    jaccard_loss_value(
        target,
        pred,
        &LossConfig {
            alpha,
            per_image: false,
        },
    )
    .unwrap()
}

#[test]
fn dice_iou_identity_and_symmetry_on_1000_pairs() {
    for case in 0..1000u64 {
        let mut rng = derive_rng(case, &[]);
        let (da, db) = (rng.random::<f64>(), rng.random::<f64>());
        let (x, y) = (random_mask(case, 1, da), random_mask(case, 2, db));
        let (i, d) = (iou(&x, &y).unwrap(), dice(&x, &y).unwrap());
        assert!(
            (d - 2.0 * i / (1.0 + i)).abs() <= 1e-12,
            "case {case}: dice {d}, iou {i}"
        );
        assert_eq!(i, iou(&y, &x).unwrap());
        assert_eq!(d, dice(&y, &x).unwrap());
    }
}

#[test]
fn hand_counted_cases() {
    // overlap 2, union 6
    let x = mask(&[1, 1, 1, 1, 0, 0, 0]);
    let y = mask(&[0, 0, 1, 1, 1, 1, 0]);
    assert!((iou(&x, &y).unwrap() - 0.333_333).abs() < 1e-6);
    // overlap 2, sizes 3 and 5
    let x = mask(&[1, 1, 1, 0, 0, 0]);
    let y = mask(&[0, 1, 1, 1, 1, 1]);
    assert_eq!(dice(&x, &y).unwrap(), 0.5);
    assert_eq!(iou(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
    assert!(iou(&mask(&[0, 2]), &mask(&[0, 1])).is_err());
}

#[test]
fn loss_worked_examples() {
    let y = mask(&[1, 0, 1, 1]);
    assert!(loss(&y, &y, 1.0).abs() < 1e-6);
    let ones = Tensor::<f64>::ones(&[4]);
    assert!((loss(&ones, &Tensor::zeros(&[4]), 1.0) - 0.8).abs() < 1e-6);
    let half = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
    assert!((loss(&mask(&[1, 0]), &half, 1.0) - 0.4).abs() < 1e-6);
}

#[test]
fn loss_is_zero_exactly_when_prediction_matches() {
    for case in 0..100u64 {
        let y = random_mask(case, 7, 0.4);
        assert_eq!(loss(&y, &y, 1.0), 0.0, "case {case}");
        let mut rng = derive_rng(case, &[8]);
        let mut wrong = y.clone();
        let flip = rng.random_range(0..wrong.len());
        wrong.data_mut()[flip] = 1.0 - wrong.data()[flip];
        assert!(loss(&y, &wrong, 1.0) > 0.0, "case {case}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn loss_lies_in_zero_to_alpha(seed in any::<u64>(), alpha in 0.01f64..5.0) {
        let y = random_mask(seed, 1, 0.5);
        let mut rng = derive_rng(seed, &[2]);
        let p = Tensor::from_fn(y.shape(), |_| rng.random::<f64>());
        let l = loss(&y, &p, alpha);
        prop_assert!((0.0..alpha).contains(&l), "{}", l);
    }

    #[test]
    fn moving_a_pixel_toward_its_target_lowers_the_loss(seed in any::<u64>(), step in 0.01f64..0.5) {
        let y = random_mask(seed, 1, 0.5);
        let mut rng = derive_rng(seed, &[3]);
        let p = Tensor::from_fn(y.shape(), |_| rng.random_range(0.0..1.0));
        let i = rng.random_range(0..p.len());
        let mut q = p.clone();
        let target = y.data()[i];
        q.data_mut()[i] += (target - q.data()[i]) * step;
        prop_assert!(loss(&y, &q, 1.0) <= loss(&y, &p, 1.0));
    }

    #[test]
    fn loss_gradient_matches_central_differences(seed in any::<u64>()) {
        let y = random_mask(seed, 1, 0.5).reshape(&[2, 1, 8, 16]).unwrap();
        let mut rng = derive_rng(seed, &[4]);
        let p = Tensor::from_fn(y.shape(), |_| rng.random_range(0.05..0.95));
        for per_image in [false, true] {
            let cfg = LossConfig { alpha: 1.0, per_image };
            let mut tape = Tape::<f64>::new();
            let pv = tape.param(p.clone()).unwrap();
            let l = jaccard_loss(&mut tape, pv, &y, &cfg).unwrap();
            tape.backward(l).unwrap();
            let g = tape.grad(pv).unwrap().clone();
            for _ in 0..8 {
                let i = rng.random_range(0..p.len());
                let h = 1e-5;
                let (mut hi, mut lo) = (p.clone(), p.clone());
                hi.data_mut()[i] += h;
                lo.data_mut()[i] -= h;
                let fd = (jaccard_loss_value(&y, &hi, &cfg).unwrap() - jaccard_loss_value(&y, &lo, &cfg).unwrap()) / (2.0 * h);
                let err = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-6);
                prop_assert!(err < 1e-4, "rel err {}", err);
            }
        }
    }
}
