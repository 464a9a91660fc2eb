//! Synthetic polyp-like scenes: smooth tissue background with bright
//! textured elliptical blobs whose exact support is the mask.

use rand::Rng;

use super::io::normalize_u8;
use super::{check_size, SegmentationSample};
use crate::error::Result;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

const MIN_COVERAGE: f64 = 0.02;
const MAX_COVERAGE: f64 = 0.40;

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    color: [f64; 3],
}

impl Blob {
    /// Squared normalized radius of `(x, y)`; inside when `< 1`.
    fn radius2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v
    }
}

fn gen_blobs(rng: &mut impl Rng, size: f64) -> Vec<Blob> {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| {
            let rx = rng.random_range(0.08..0.22) * size;
            let ry = rng.random_range(0.08..0.22) * size;
            let margin = rx.max(ry) * 0.6;
            Blob {
                cx: rng.random_range(margin..size - margin),
                cy: rng.random_range(margin..size - margin),
                rx,
                ry,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                color: [
                    rng.random_range(205.0..245.0),
                    rng.random_range(150.0..200.0),
                    rng.random_range(120.0..170.0),
                ],
            }
        })
        .collect()
}

fn one_sample(index: usize, size: usize, seed: u64) -> SegmentationSample {
    let mut rng = derive_rng(seed, &[0x5359_4e54, index as u64]);
    let s = size as f64;
    let (blobs, support) = loop {
        let blobs = gen_blobs(&mut rng, s);
        let support: Vec<bool> = (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
                blobs.iter().any(|b| b.radius2(x, y) < 1.0)
            })
            .collect();
        let cov = support.iter().filter(|&&v| v).count() as f64 / (size * size) as f64;
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&cov) {
            break (blobs, support);
        }
    };

    // low-frequency background: base tissue tone plus two slow waves
    let base = [
        rng.random_range(110.0..150.0),
        rng.random_range(50.0..80.0),
        rng.random_range(40.0..70.0),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.5..2.0) * std::f64::consts::TAU / s,
                rng.random_range(0.5..2.0) * std::f64::consts::TAU / s,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(10.0..25.0),
            )
        })
        .collect();
    let texture_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let texture_freq = rng.random_range(0.25..0.6);

    let plane = size * size;
    let mut image = vec![0.0f32; 3 * plane];
    let mut mask = vec![0.0f32; plane];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let shade: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * fx + ky * fy + ph).sin())
                .sum();
            let mut px = base.map(|b| b + shade);
            let i = y * size + x;
            if support[i] {
                // brightest blob containing the pixel wins; shading falls off to the rim
                let b = blobs
                    .iter()
                    .filter(|b| b.radius2(fx, fy) < 1.0)
                    .min_by(|a, b| a.radius2(fx, fy).total_cmp(&b.radius2(fx, fy)))
                    .expect("support pixel lies in a blob");
                let r2 = b.radius2(fx, fy);
                let texture = 8.0 * ((fx + fy) * texture_freq + texture_phase).sin() * (fx * texture_freq).cos();
                px = b.color.map(|c| c - 25.0 * r2 + texture);
                mask[i] = 1.0;
            }
            for (c, v) in px.iter().enumerate() {
                let q = v.round().clamp(0.0, 255.0);
                image[c * plane + i] = normalize_u8(q);
            }
        }
    }
    SegmentationSample {
        id: format!("synth_{index:04}"),
        image: Tensor::new(&[3, size, size], image).expect("sized buffer"),
        mask: Tensor::new(&[1, size, size], mask).expect("sized buffer"),
    }
}

/// `n` seeded synthetic samples of `size x size` pixels.
///
/// Pixel values are quantized to 8-bit levels before normalization, so a
/// dataset written to PNG and loaded back is unchanged.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SegmentationSample>> {
    check_size(size)?;
    Ok((0..n).map(|i| one_sample(i, size, seed)).collect())
}
