//! Depth samples, the DRF1 raster format, synthetic scenes, augmentation,
//! crops and the on-disk dataset layout.

mod augment;
mod crop;
mod dataset;
mod raster;
mod scene;

pub use augment::{augment, hflip, photometric, rotate, AugmentConfig, DatasetPreset};
pub use crop::{crop, crop_window, CropMode, EIGEN_CROP, KITTI_CROP_H, KITTI_CROP_W};
pub use dataset::{generate_dataset, list_ids, load_sample, save_sample, Dataset};
pub use raster::{load_raster, save_raster, Raster, HEADER_LEN, RASTER_MAGIC};
pub use scene::{synth_scene, Material, Primitive, SceneSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image, metric depth and the validity mask of its pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    /// `3×H×W`, nominally in [0, 1].
    pub rgb: Tensor,
    /// `1×H×W`, meters.
    pub depth: Tensor,
    /// `H·W` entries, row-major.
    pub mask: Vec<bool>,
}

impl DepthSample {
    pub fn new(rgb: Tensor, depth: Tensor, mask: Vec<bool>) -> Result<Self> {
        let (rs, ds) = (rgb.shape(), depth.shape());
        if rs.len() != 3 || rs[0] != 3 || ds != [1, rs[1], rs[2]] || mask.len() != rs[1] * rs[2] {
            return Err(Error::shape("depth_sample", format!("mask has {} entries", mask.len()), &[rs, ds]));
        }
        Ok(DepthSample { rgb, depth, mask })
    }

    /// Valid where depth is positive.
    pub fn from_rgb_depth(rgb: Tensor, depth: Tensor) -> Result<Self> {
        let mask = depth.data().iter().map(|&d| d > 0.0).collect();
        Self::new(rgb, depth, mask)
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }
}
