//! Samples, on-disk datasets, synthetic lesion generation, splitting and
//! augmentation.
//!
//! Dataset directory layout:
//!
//! ```text
//! <dir>/images/<id>.png   8-bit RGB
//! <dir>/masks/<id>.png    8-bit gray, 0 or 255
//! <dir>/splits.json       {"labeled": [..], "unlabeled": [..], "val": [..], "test": [..]}
//! ```

mod augment;
mod io;
mod raster;
mod split;
mod synthetic;

pub use augment::{augment, prepare, AugmentConfig};
pub use io::{load_dataset, load_image, read_splits, save_png, save_sample, write_splits, SplitIds};
pub use raster::Raster;
pub use split::{split, split_from_ids, Split, SplitSpec};
pub use synthetic::{generate_synthetic, synthesize, SyntheticSpec};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// One image with an optional binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Raster,
    /// `H x W x 1`, values in `{0, 1}`.
    pub mask: Option<Raster>,
    pub is_labeled: bool,
}

impl SegSample {
    pub fn validate(&self) -> Result<()> {
        if self.is_labeled && self.mask.is_none() {
            return Err(Error::Invalid(format!("sample `{}` is labeled but has no mask", self.id)));
        }
        if let Some(m) = &self.mask {
            if (m.height, m.width, m.channels) != (self.image.height, self.image.width, 1) {
                return Err(shape_err(
                    "SegSample",
                    format!(
                        "`{}`: mask {}x{}x{} vs image {}x{}",
                        self.id, m.height, m.width, m.channels, self.image.height, self.image.width
                    ),
                ));
            }
            if m.data.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Invalid(format!("sample `{}` has a non-binary mask", self.id)));
            }
        }
        Ok(())
    }

    /// Copy with the mask removed.
    pub fn withhold_mask(&self) -> Self {
        Self {
            mask: None,
            is_labeled: false,
            ..self.clone()
        }
    }

    pub fn foreground_pixels(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(0, |m| m.data.iter().filter(|&&v| v == 1.0).count())
    }
}

/// Stacks sample images into `[batch, channels, height, width]`.
pub fn image_batch<T: Element>(samples: &[&SegSample]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w, c) = (first.image.height, first.image.width, first.image.channels);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if (s.image.height, s.image.width, s.image.channels) != (h, w, c) {
            return Err(shape_err("image_batch", format!("`{}` differs in size from `{}`", s.id, first.id)));
        }
        s.image.extend_planar(&mut data);
    }
    Tensor::new([samples.len(), c, h, w], data)
}

/// Stacks masks into `[batch, 1, height, width]`. Every sample needs a mask.
pub fn mask_batch<T: Element>(samples: &[&SegSample]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        let m = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("sample `{}` has no mask", s.id)))?;
        if (m.height, m.width) != (h, w) {
            return Err(shape_err("mask_batch", format!("`{}` differs in size from `{}`", s.id, first.id)));
        }
        m.extend_planar(&mut data);
    }
    Tensor::new([samples.len(), 1, h, w], data)
}
