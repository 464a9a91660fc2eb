//! PNG dataset layout `<root>/images/<id>.png` + `<root>/masks/<id>.png`,
//! and the seeded train/val/test split.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;

use super::{check_size, SegmentationSample};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Mask pixels at or above this value are foreground.
pub const MASK_THRESHOLD: u8 = 128;

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.eq_ignore_ascii_case("png"))
            == Some(true)
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// `v / 127.5 - 1`, evaluated in f64 so every path rounds identically.
pub(crate) fn normalize_u8(v: f64) -> f32 {
    (v / 127.5 - 1.0) as f32
}

/// Map 8-bit RGB to a `[3, H, W]` tensor via `v / 127.5 - 1`.
pub fn normalize_rgb(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = normalize_u8(px[c] as f64);
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized buffer")
}

pub fn load_image_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8())
}

fn resize_rgb(img: RgbImage, size: usize) -> RgbImage {
    if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    }
}

/// Nearest-neighbour resize of an 8-bit mask.
pub fn resize_mask(mask: &GrayImage, width: u32, height: u32) -> GrayImage {
    if mask.width() == width && mask.height() == height {
        mask.clone()
    } else {
        imageops::resize(mask, width, height, FilterType::Nearest)
    }
}

/// Load every image/mask pair, resized to `size x size`.
pub fn load_dataset(dir: &Path, size: usize) -> Result<Vec<SegmentationSample>> {
    check_size(size)?;
    let images = png_stems(&dir.join("images"))?;
    let masks = png_stems(&dir.join("masks"))?;
    let orphans: Vec<String> = images
        .symmetric_difference(&masks)
        .map(|id| {
            let side = if images.contains(id) { "masks" } else { "images" };
            format!("{id}.png has no counterpart in {side}/")
        })
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Data(format!("unpaired files: {}", orphans.join("; "))));
    }
    images
        .iter()
        .map(|id| {
            let img = resize_rgb(load_image_rgb(&dir.join("images").join(format!("{id}.png")))?, size);
            let mpath = dir.join("masks").join(format!("{id}.png"));
            let mask = image::open(&mpath)
                .map_err(|e| Error::Data(format!("cannot read mask {}: {e}", mpath.display())))?
                .to_luma8();
            let mask = resize_mask(&mask, size as u32, size as u32);
            let mdata = mask
                .pixels()
                .map(|p| if p[0] >= MASK_THRESHOLD { 1.0 } else { 0.0 })
                .collect();
            SegmentationSample::new(id.clone(), normalize_rgb(&img), Tensor::new(&[1, size, size], mdata)?)
        })
        .collect()
}

fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Write a `[1, H, W]` (or `[H, W]`) binary mask as 0/255 grayscale PNG.
pub fn save_mask_png(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let (h, w) = match mask.shape() {
        &[1, h, w] | &[1, 1, h, w] | &[h, w] => (h, w),
        s => return Err(Error::Shape(format!("mask must be [1, H, W], got {s:?}"))),
    };
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = mask.data()[y as usize * w + x as usize];
        Luma([if v >= 0.5 { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

/// Predict the mask of one PNG and write it as a 0/255 PNG of the same size.
///
/// The image is resized to `size x size` (the model's training resolution)
/// when it differs, and the mask is resized back with nearest sampling.
pub fn predict_png(model: &Model<f32>, size: usize, input: &Path, output: &Path, threshold: f64) -> Result<()> {
    check_size(size)?;
    let img = load_image_rgb(input)?;
    let (w, h) = (img.width(), img.height());
    let x = normalize_rgb(&resize_rgb(img, size));
    let pred = model.predict_mask(&x.reshape(&[1, 3, size, size])?, threshold)?;
    let small: GrayImage = ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
        Luma([if pred.data()[y as usize * size + x as usize] >= 0.5 {
            255
        } else {
            0
        }])
    });
    resize_mask(&small, w, h).save(output)?;
    Ok(())
}

/// Write samples in the on-disk dataset layout.
pub fn save_dataset(dir: &Path, samples: &[SegmentationSample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let plane = h * w;
        let d = s.image.data();
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
        });
        img.save(dir.join("images").join(format!("{}.png", s.id)))?;
        save_mask_png(&dir.join("masks").join(format!("{}.png", s.id)), &s.mask)?;
    }
    Ok(())
}

/// Train/validation/test fractions and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

/// Seeded shuffle, then contiguous partition: `floor` sizes for train and
/// val, the remainder to test.
pub fn split<S: Clone>(samples: &[S], spec: &SplitSpec) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fr:?} must lie in [0, 1] and sum to 1"
        )));
    }
    if samples.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 samples to split, got {}",
            samples.len()
        )));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(spec.seed, &[0x5350_4c54]));
    // small epsilon so 0.6 * 10 lands on 6 despite binary rounding
    let n_train = ((n as f64 * spec.train) + 1e-9).floor() as usize;
    let n_val = (((n as f64 * spec.val) + 1e-9).floor() as usize).min(n - n_train);
    let pick = |r: std::ops::Range<usize>| order[r].iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_val),
        pick(n_train + n_val..n),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    #[test]
    fn split_sizes_and_partition() {
        let items: Vec<usize> = (0..10).collect();
        let spec = SplitSpec::default();
        let (a, b, c) = split(&items, &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert_eq!(split(&items, &spec).unwrap(), (a, b, c));
        assert!(split(&items[..2], &spec).is_err());
        let bad = SplitSpec { train: 0.7, ..spec };
        assert!(split(&items, &bad).is_err());
    }

    #[test]
    fn disk_round_trip_and_thresholds() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_dataset(3, 32, 1).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path(), 32).unwrap();
        assert_eq!(loaded, samples);

        // endpoint and threshold checks on a hand-made pair
        let root = dir.path().join("hand");
        fs::create_dir_all(root.join("images")).unwrap();
        fs::create_dir_all(root.join("masks")).unwrap();
        let img: RgbImage = ImageBuffer::from_fn(32, 32, |x, _| if x < 16 { Rgb([255; 3]) } else { Rgb([0; 3]) });
        img.save(root.join("images/a.png")).unwrap();
        let m: GrayImage = ImageBuffer::from_fn(32, 32, |x, _| if x < 16 { Luma([200]) } else { Luma([100]) });
        m.save(root.join("masks/a.png")).unwrap();
        let s = &load_dataset(&root, 32).unwrap()[0];
        assert_eq!(s.image.data()[0], 1.0);
        assert_eq!(s.image.data()[31], -1.0);
        assert_eq!(s.mask.data()[0], 1.0);
        assert_eq!(s.mask.data()[31], 0.0);

        fs::copy(root.join("images/a.png"), root.join("images/b.png")).unwrap();
        let err = load_dataset(&root, 32).unwrap_err();
        assert!(err.to_string().contains("b.png"), "{err}");
        assert!(load_dataset(dir.path(), 33).is_err());
    }
}
