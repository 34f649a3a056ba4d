use super::DepthSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KITTI_CROP_W: usize = 1216;
pub const KITTI_CROP_H: usize = 352;

/// Interior evaluation window for 640×480 indoor frames as fractions of the
/// extents: rows 45..471 of 480 and columns 41..601 of 640, from Eigen et
/// al., "Depth Map Prediction from a Single Image using a Multi-Scale Deep
/// Network" (2014), as distributed with their evaluation code.
/// Order: top, bottom, left, right.
pub const EIGEN_CROP: [f64; 4] = [45.0 / 480.0, 471.0 / 480.0, 41.0 / 640.0, 601.0 / 640.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// 1216×352 window, centered horizontally, touching the bottom edge.
    KittiBottomCenter,
    EigenCenter,
    None,
}

impl std::str::FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti" | "kitti_bottom_center" => Ok(CropMode::KittiBottomCenter),
            "eigen" | "eigen_center" => Ok(CropMode::EigenCenter),
            "none" => Ok(CropMode::None),
            other => Err(Error::config(format!("unknown crop mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for CropMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CropMode::KittiBottomCenter => "kitti",
            CropMode::EigenCenter => "eigen",
            CropMode::None => "none",
        })
    }
}

fn window(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let (c, sh, sw) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert!(top + h <= sh && left + w <= sw);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for r in top..top + h {
            let start = (ch * sh + r) * sw + left;
            out.extend_from_slice(&t.data()[start..start + w]);
        }
    }
    Tensor::new(&[c, h, w], out).expect("window fits")
}

/// Returns the `(top, left, height, width)` window for `mode`.
pub fn crop_window(mode: CropMode, height: usize, width: usize) -> Result<(usize, usize, usize, usize)> {
    match mode {
        CropMode::None => Ok((0, 0, height, width)),
        CropMode::KittiBottomCenter => {
            if height < KITTI_CROP_H || width < KITTI_CROP_W {
                return Err(Error::shape(
                    "crop",
                    format!("{KITTI_CROP_W}×{KITTI_CROP_H} window does not fit"),
                    &[&[height, width]],
                ));
            }
            Ok((height - KITTI_CROP_H, (width - KITTI_CROP_W) / 2, KITTI_CROP_H, KITTI_CROP_W))
        }
        CropMode::EigenCenter => {
            let [t, b, l, r] = EIGEN_CROP;
            let top = (t * height as f64).round() as usize;
            let bottom = (b * height as f64).round() as usize;
            let left = (l * width as f64).round() as usize;
            let right = (r * width as f64).round() as usize;
            if bottom <= top || right <= left {
                return Err(Error::shape("crop", "raster too small for the interior window", &[&[height, width]]));
            }
            Ok((top, left, bottom - top, right - left))
        }
    }
}

pub fn crop(s: &DepthSample, mode: CropMode) -> Result<DepthSample> {
    let (h, w) = (s.height(), s.width());
    let (top, left, ch, cw) = crop_window(mode, h, w)?;
    if (top, left, ch, cw) == (0, 0, h, w) {
        return Ok(s.clone());
    }
    let mask = (top..top + ch).flat_map(|r| (left..left + cw).map(move |c| s.mask[r * w + c])).collect();
    DepthSample::new(window(&s.rgb, top, left, ch, cw), window(&s.depth, top, left, ch, cw), mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn indexed(h: usize, w: usize) -> DepthSample {
        let depth = Tensor::new(&[1, h, w], (0..h * w).map(|i| i as f64 + 1.0).collect()).unwrap();
        DepthSample::from_rgb_depth(Tensor::full(&[3, h, w], 0.5), depth).unwrap()
    }

    #[test]
    fn kitti_window_is_bottom_center() {
        let (h, w) = (375, 1241);
        let s = indexed(h, w);
        let c = crop(&s, CropMode::KittiBottomCenter).unwrap();
        assert_eq!((c.height(), c.width()), (352, 1216));
        // 23 rows dropped from the top, 25 columns split 12 left / 13 right
        let (top, left) = (23, 12);
        assert_eq!(c.depth.at(&[0, 0, 0]), (top * w + left) as f64 + 1.0);
        assert_eq!(c.depth.at(&[0, 351, 1215]), ((h - 1) * w + left + 1215) as f64 + 1.0);
        assert_eq!(w - (left + 1216), 13);
    }

    #[test]
    fn eigen_window_on_full_frame() {
        assert_eq!(crop_window(CropMode::EigenCenter, 480, 640).unwrap(), (45, 41, 426, 560));
        let c = crop(&indexed(480, 640), CropMode::EigenCenter).unwrap();
        assert_eq!(c.depth.at(&[0, 0, 0]), (45 * 640 + 41) as f64 + 1.0);
    }

    #[test]
    fn none_and_constant() {
        let s = indexed(40, 50);
        assert_eq!(crop(&s, CropMode::None).unwrap(), s);
        let k = DepthSample::from_rgb_depth(Tensor::full(&[3, 400, 1300], 0.2), Tensor::full(&[1, 400, 1300], 7.0)).unwrap();
        for mode in [CropMode::KittiBottomCenter, CropMode::EigenCenter] {
            let c = crop(&k, mode).unwrap();
            assert!(c.depth.data().iter().all(|&d| d == 7.0));
            assert!(c.rgb.data().iter().all(|&d| d == 0.2));
        }
    }

    #[test]
    fn oversized_window_is_a_shape_error() {
        assert!(matches!(crop(&indexed(300, 1241), CropMode::KittiBottomCenter), Err(Error::Shape { .. })));
    }
}
