//! Samples, on-disk datasets, synthetic data and augmentation.

mod augment;
mod io;
mod synth;

pub use augment::{augment, augment_indexed, AppliedTransform, AugmentationPolicy};
pub use io::{
    load_dataset, load_image_rgb, normalize_rgb, predict_png, resize_mask, save_dataset, save_mask_png, split,
    SplitSpec, MASK_THRESHOLD,
};
pub use synth::synth_dataset;

use crate::error::{Error, Result};
use crate::network::NETWORK_STRIDE;
use crate::tensor::Tensor;

/// An image `[3, H, W]` in `[-1, 1]` paired with a binary mask `[1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let (ic, ih, iw) = match image.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::Shape(format!("image must be [3, H, W], got {s:?}"))),
        };
        if ic != 3 || mask.shape() != [1, ih, iw] {
            return Err(Error::Shape(format!(
                "image {:?} and mask {:?} do not pair up",
                image.shape(),
                mask.shape()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Stack images and masks of `samples` into `[b,3,h,w]` and `[b,1,h,w]`.
pub fn collate(samples: &[&SegmentationSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

pub(crate) fn check_size(size: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(NETWORK_STRIDE) {
        return Err(Error::Config(format!(
            "image size {size} must be a positive multiple of {NETWORK_STRIDE}"
        )));
    }
    Ok(())
}
