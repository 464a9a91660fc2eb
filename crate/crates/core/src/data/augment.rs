//! Paired image/mask augmentation: center crop, rotation, grid distortion,
//! cutout and flips.
//!
//! Geometric transforms are expressed as a map from output pixel centres to
//! source coordinates and applied identically to image (bilinear) and mask
//! (nearest). Pixels that map outside the source take the zero pixel value,
//! which is `-1.0` in normalized image space and `0` in the mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::SegmentationSample;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Enable probabilities and parameter ranges of every transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub seed: u64,
    pub p_center_crop: f64,
    /// Crop side as a fraction of the original, drawn from `[min, 1]`.
    pub crop_min_fraction: f64,
    pub p_rotate: f64,
    pub max_rotation_degrees: f64,
    pub p_grid_distortion: f64,
    pub grid_steps: usize,
    /// Per-cell scale drawn from `[1 - limit, 1 + limit]`.
    pub distort_limit: f64,
    pub p_cutout: f64,
    pub cutout_holes: (usize, usize),
    /// Hole side as a fraction of `min(H, W)`.
    pub cutout_size: (f64, f64),
    pub p_hflip: f64,
    pub p_vflip: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            seed: 0,
            p_center_crop: 0.3,
            crop_min_fraction: 0.7,
            p_rotate: 0.3,
            max_rotation_degrees: 90.0,
            p_grid_distortion: 0.3,
            grid_steps: 5,
            distort_limit: 0.3,
            p_cutout: 0.5,
            cutout_holes: (1, 8),
            cutout_size: (0.08, 0.25),
            p_hflip: 0.5,
            p_vflip: 0.5,
        }
    }
}

impl AugmentationPolicy {
    /// Every probability zero: augmentation is the identity.
    pub fn none() -> Self {
        Self {
            p_center_crop: 0.0,
            p_rotate: 0.0,
            p_grid_distortion: 0.0,
            p_cutout: 0.0,
            p_hflip: 0.0,
            p_vflip: 0.0,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        [
            self.p_center_crop,
            self.p_rotate,
            self.p_grid_distortion,
            self.p_cutout,
            self.p_hflip,
            self.p_vflip,
        ]
        .iter()
        .all(|&p| p <= 0.0)
    }
}

/// A transform that was applied, with the parameters drawn for it.
#[derive(Debug, Clone, PartialEq)]
pub enum AppliedTransform {
    CenterCrop {
        fraction: f64,
    },
    Rotate {
        degrees: f64,
    },
    /// Source positions of the uniform output grid lines along x and y.
    GridDistortion {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
    /// Holes as `(x0, y0, side)` in pixels.
    Cutout {
        holes: Vec<(usize, usize, usize)>,
    },
    HorizontalFlip,
    VerticalFlip,
}

/// Augmentation stream of sample `index` in `epoch`.
pub fn augment_indexed(
    sample: &SegmentationSample,
    policy: &AugmentationPolicy,
    epoch: u64,
    index: u64,
) -> (SegmentationSample, Vec<AppliedTransform>) {
    let mut rng = derive_rng(policy.seed, &[0x4155_4721, epoch, index]);
    augment(sample, policy, &mut rng)
}

/// Apply each enabled transform with its probability, in a fixed order.
pub fn augment(
    sample: &SegmentationSample,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> (SegmentationSample, Vec<AppliedTransform>) {
    let mut out = sample.clone();
    let mut applied = Vec::new();
    let (h, w) = (sample.height(), sample.width());
    let coin = |rng: &mut ChaCha8Rng, p: f64| p > 0.0 && rng.random::<f64>() < p;

    if coin(rng, policy.p_center_crop) {
        let fraction = rng.random_range(policy.crop_min_fraction.min(1.0)..=1.0);
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        out = remap(&out, |x, y| (cx + (x - cx) * fraction, cy + (y - cy) * fraction));
        applied.push(AppliedTransform::CenterCrop { fraction });
    }
    if coin(rng, policy.p_rotate) {
        let max = policy.max_rotation_degrees;
        let degrees = rng.random_range(-max..=max);
        let (s, c) = degrees.to_radians().sin_cos();
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        // source = R(-theta) * (p - centre) + centre
        out = remap(&out, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            (cx + c * dx + s * dy, cy - s * dx + c * dy)
        });
        applied.push(AppliedTransform::Rotate { degrees });
    }
    if coin(rng, policy.p_grid_distortion) {
        let steps = policy.grid_steps.max(1);
        let lim = policy.distort_limit;
        let mut grid = |extent: usize| -> Vec<f64> {
            let scales: Vec<f64> = (0..steps).map(|_| rng.random_range(1.0 - lim..=1.0 + lim)).collect();
            let total: f64 = scales.iter().sum();
            let mut acc = 0.0;
            let mut lines = vec![0.0];
            for s in scales {
                acc += s;
                lines.push(acc / total * extent as f64);
            }
            lines
        };
        let xs = grid(w);
        let ys = grid(h);
        out = remap(&out, |x, y| (piecewise(&xs, x, w), piecewise(&ys, y, h)));
        applied.push(AppliedTransform::GridDistortion { xs, ys });
    }
    if coin(rng, policy.p_cutout) {
        let (lo, hi) = policy.cutout_holes;
        let n = rng.random_range(lo.max(1)..=hi.max(lo.max(1)));
        let short = h.min(w) as f64;
        let holes: Vec<_> = (0..n)
            .map(|_| {
                let side = ((rng.random_range(policy.cutout_size.0..=policy.cutout_size.1) * short).round() as usize)
                    .clamp(1, h.min(w));
                let x0 = rng.random_range(0..=w - side);
                let y0 = rng.random_range(0..=h - side);
                (x0, y0, side)
            })
            .collect();
        apply_cutout(&mut out, &holes);
        applied.push(AppliedTransform::Cutout { holes });
    }
    if coin(rng, policy.p_hflip) {
        out = hflip(&out);
        applied.push(AppliedTransform::HorizontalFlip);
    }
    if coin(rng, policy.p_vflip) {
        out = vflip(&out);
        applied.push(AppliedTransform::VerticalFlip);
    }
    (out, applied)
}

/// Map a uniform output position to the distorted source position.
fn piecewise(lines: &[f64], pos: f64, extent: usize) -> f64 {
    let steps = lines.len() - 1;
    let cell = extent as f64 / steps as f64;
    let t = (pos / cell).clamp(0.0, steps as f64);
    let i = (t.floor() as usize).min(steps - 1);
    let f = t - i as f64;
    lines[i] + f * (lines[i + 1] - lines[i])
}

/// Resample through `src(x, y)`, where coordinates are continuous with pixel
/// `i` covering `[i, i+1)`.
fn remap(s: &SegmentationSample, src: impl Fn(f64, f64) -> (f64, f64)) -> SegmentationSample {
    let (h, w) = (s.height(), s.width());
    let plane = h * w;
    let img = s.image.data();
    let msk = s.mask.data();
    let mut image = vec![-1.0f32; 3 * plane];
    let mut mask = vec![0.0f32; plane];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x as f64 + 0.5, y as f64 + 0.5);
            let i = y * w + x;
            // nearest for the mask
            let (nx, ny) = (sx.floor(), sy.floor());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                mask[i] = msk[ny as usize * w + nx as usize];
            }
            // bilinear on pixel centres; out-of-range taps read the fill value
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            if fx <= -1.0 || fy <= -1.0 || fx >= w as f64 || fy >= h as f64 {
                continue;
            }
            let (x0, y0) = (fx.floor() as isize, fy.floor() as isize);
            let (ax, ay) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
            for c in 0..3 {
                let tap = |xx: isize, yy: isize| -> f32 {
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        -1.0
                    } else {
                        img[c * plane + yy as usize * w + xx as usize]
                    }
                };
                let top = tap(x0, y0) * (1.0 - ax) + tap(x0 + 1, y0) * ax;
                let bot = tap(x0, y0 + 1) * (1.0 - ax) + tap(x0 + 1, y0 + 1) * ax;
                image[c * plane + i] = (top * (1.0 - ay) + bot * ay).clamp(-1.0, 1.0);
            }
        }
    }
    SegmentationSample {
        id: s.id.clone(),
        image: Tensor::new(&[3, h, w], image).expect("sized buffer"),
        mask: Tensor::new(&[1, h, w], mask).expect("sized buffer"),
    }
}

fn apply_cutout(s: &mut SegmentationSample, holes: &[(usize, usize, usize)]) {
    let (h, w) = (s.height(), s.width());
    let plane = h * w;
    for &(x0, y0, side) in holes {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                for c in 0..3 {
                    s.image.data_mut()[c * plane + y * w + x] = -1.0;
                }
                s.mask.data_mut()[y * w + x] = 0.0;
            }
        }
    }
}

fn flip_map(t: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let &[c, h, w] = t.shape() else {
        unreachable!("sample tensors are rank 3")
    };
    let d = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
        d[ch * h * w + sy * w + sx]
    })
}

fn hflip(s: &SegmentationSample) -> SegmentationSample {
    SegmentationSample {
        id: s.id.clone(),
        image: flip_map(&s.image, true),
        mask: flip_map(&s.mask, true),
    }
}

fn vflip(s: &SegmentationSample) -> SegmentationSample {
    SegmentationSample {
        id: s.id.clone(),
        image: flip_map(&s.image, false),
        mask: flip_map(&s.mask, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn sample() -> SegmentationSample {
        synth_dataset(1, 64, 5).unwrap().remove(0)
    }

    fn only(f: impl FnOnce(&mut AugmentationPolicy)) -> AugmentationPolicy {
        let mut p = AugmentationPolicy::none();
        f(&mut p);
        p
    }

    #[test]
    fn double_hflip_is_identity() {
        let s = sample();
        let p = only(|p| p.p_hflip = 1.0);
        let (once, applied) = augment_indexed(&s, &p, 0, 0);
        assert_eq!(applied, vec![AppliedTransform::HorizontalFlip]);
        assert_ne!(once, s);
        let (twice, _) = augment_indexed(&once, &p, 0, 0);
        assert_eq!(twice, s);
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let s = sample();
        let (out, applied) = augment_indexed(&s, &AugmentationPolicy::none(), 3, 1);
        assert!(applied.is_empty());
        assert_eq!(out, s);
    }

    #[test]
    fn cutout_replays_recorded_holes() {
        let s = sample();
        let p = only(|p| {
            p.p_cutout = 1.0;
            p.cutout_holes = (1, 1);
        });
        let (out, applied) = augment_indexed(&s, &p, 0, 4);
        let [AppliedTransform::Cutout { holes }] = applied.as_slice() else {
            panic!("expected one cutout, got {applied:?}")
        };
        let &[(x0, y0, side)] = holes.as_slice() else { panic!() };
        assert!((5..=16).contains(&side), "side {side}");
        let (h, w) = (64, 64);
        for y in 0..h {
            for x in 0..w {
                let inside = (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y);
                let mi = y * w + x;
                for c in 0..3 {
                    let i = c * h * w + mi;
                    if inside {
                        assert_eq!(out.image.data()[i], -1.0);
                    } else {
                        assert_eq!(out.image.data()[i], s.image.data()[i]);
                    }
                }
                if inside {
                    assert_eq!(out.mask.data()[mi], 0.0);
                } else {
                    assert_eq!(out.mask.data()[mi], s.mask.data()[mi]);
                }
            }
        }
    }

    #[test]
    fn every_transform_preserves_shape_and_range() {
        let s = sample();
        let p = AugmentationPolicy {
            p_center_crop: 1.0,
            p_rotate: 1.0,
            p_grid_distortion: 1.0,
            p_cutout: 1.0,
            p_hflip: 1.0,
            p_vflip: 1.0,
            ..AugmentationPolicy::default()
        };
        for idx in 0..10 {
            let (out, applied) = augment_indexed(&s, &p, 1, idx);
            assert_eq!(applied.len(), 6);
            assert_eq!(out.image.shape(), s.image.shape());
            assert_eq!(out.mask.shape(), s.mask.shape());
            assert!(out.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn rotation_moves_image_and_mask_together() {
        // a single bright marker pixel in both image and mask
        let n = 64;
        let mut img = vec![-1.0f32; 3 * n * n];
        let mut msk = vec![0.0f32; n * n];
        let (mx, my) = (40, 20);
        for c in 0..3 {
            img[c * n * n + my * n + mx] = 1.0;
        }
        msk[my * n + mx] = 1.0;
        let s = SegmentationSample::new(
            "m",
            Tensor::new(&[3, n, n], img).unwrap(),
            Tensor::new(&[1, n, n], msk).unwrap(),
        )
        .unwrap();
        let p = only(|p| p.p_rotate = 1.0);
        for idx in 0..5 {
            let (out, applied) = augment_indexed(&s, &p, 0, idx);
            assert!(matches!(applied[0], AppliedTransform::Rotate { .. }));
            for (i, &m) in out.mask.data().iter().enumerate() {
                if m == 1.0 {
                    // nearest-sampled marker lands where the image got signal
                    assert!(out.image.data()[i] > -1.0, "sample {idx} pixel {i}");
                }
            }
        }
    }

    #[test]
    fn stream_is_reproducible() {
        let s = sample();
        let p = AugmentationPolicy::default();
        assert_eq!(augment_indexed(&s, &p, 2, 3), augment_indexed(&s, &p, 2, 3));
    }
}
