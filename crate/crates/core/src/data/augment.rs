use rand::Rng;

use super::DepthSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetPreset {
    Nyu,
    Kitti,
    Synth,
}

impl std::str::FromStr for DatasetPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nyu" => Ok(DatasetPreset::Nyu),
            "kitti" => Ok(DatasetPreset::Kitti),
            "synth" | "desk" => Ok(DatasetPreset::Synth),
            other => Err(Error::config(format!("unknown dataset preset {other:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetPreset::Nyu => "nyu",
            DatasetPreset::Kitti => "kitti",
            DatasetPreset::Synth => "synth",
        })
    }
}

/// Random geometric and photometric jitter. Multiplicative ranges are
/// `(lo, hi)`; `(1, 1)` disables a jitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub preset: DatasetPreset,
    pub hflip_prob: f64,
    /// Angles are drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub contrast: (f64, f64),
    pub brightness: (f64, f64),
    /// Per-channel gain.
    pub color: (f64, f64),
}

impl AugmentConfig {
    pub fn preset(preset: DatasetPreset) -> Self {
        let (rotation_deg, brightness) = match preset {
            DatasetPreset::Nyu => (2.5, (0.75, 1.25)),
            DatasetPreset::Kitti => (1.0, (0.9, 1.1)),
            DatasetPreset::Synth => (0.0, (0.9, 1.1)),
        };
        AugmentConfig { preset, hflip_prob: 0.5, rotation_deg, contrast: (0.9, 1.1), brightness, color: (0.9, 1.1) }
    }

    /// No jitter at all.
    pub fn identity(preset: DatasetPreset) -> Self {
        AugmentConfig {
            preset,
            hflip_prob: 0.0,
            rotation_deg: 0.0,
            contrast: (1.0, 1.0),
            brightness: (1.0, 1.0),
            color: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config(format!("augment.hflip_prob: {} is outside [0, 1]", self.hflip_prob)));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg < 90.0) {
            return Err(Error::config(format!("augment.rotation_deg: {} is outside [0, 90)", self.rotation_deg)));
        }
        for (name, (lo, hi)) in [("contrast", self.contrast), ("brightness", self.brightness), ("color", self.color)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config(format!("augment.{name}: ({lo}, {hi}) needs 0 < lo <= hi")));
            }
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Mirrors image, depth and mask left to right.
pub fn hflip(s: &DepthSample) -> DepthSample {
    let (h, w) = (s.height(), s.width());
    let flip = |t: &Tensor| {
        let c = t.shape()[0];
        let mut out = t.clone();
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    out.data_mut()[(ch * h + r) * w + col] = t.data()[(ch * h + r) * w + (w - 1 - col)];
                }
            }
        }
        out
    };
    let mask = (0..h * w).map(|i| s.mask[(i / w) * w + (w - 1 - i % w)]).collect();
    DepthSample { rgb: flip(&s.rgb), depth: flip(&s.depth), mask }
}

/// Rotates about the image center. RGB is resampled bilinearly, depth and
/// mask by nearest neighbor so depths from different surfaces never mix.
/// Pixels whose source falls outside the frame get zero depth and are
/// masked out.
pub fn rotate(s: &DepthSample, degrees: f64) -> DepthSample {
    if degrees == 0.0 {
        return s.clone();
    }
    let (h, w) = (s.height(), s.width());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut rgb = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            // inverse map: output pixel samples the source rotated back
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let (nr, nc) = (sy.round(), sx.round());
            if nr >= 0.0 && nc >= 0.0 && (nr as usize) < h && (nc as usize) < w {
                let src = nr as usize * w + nc as usize;
                depth[r * w + c] = s.depth.data()[src];
                mask[r * w + c] = s.mask[src];
            }
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                mask[r * w + c] = false;
                depth[r * w + c] = 0.0;
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..3 {
                let at = |y: usize, x: usize| s.rgb.data()[(ch * h + y) * w + x];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                rgb[(ch * h + r) * w + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    DepthSample {
        rgb: Tensor::new(&[3, h, w], rgb).expect("same extents"),
        depth: Tensor::new(&[1, h, w], depth).expect("same extents"),
        mask,
    }
}

/// Contrast about the per-image mean, brightness gain, per-channel color
/// gain, clamped to [0, 1]. Depth and mask are untouched.
pub fn photometric(s: &DepthSample, contrast: f64, brightness: f64, color: [f64; 3]) -> DepthSample {
    let n = s.rgb.len();
    let mean = s.rgb.data().iter().sum::<f64>() / n as f64;
    let plane = n / 3;
    let mut rgb = s.rgb.clone();
    for (i, v) in rgb.data_mut().iter_mut().enumerate() {
        let stretched = if contrast == 1.0 { *v } else { (*v - mean) * contrast + mean };
        let x = stretched * brightness * color[i / plane];
        *v = x.clamp(0.0, 1.0);
    }
    DepthSample { rgb, depth: s.depth.clone(), mask: s.mask.clone() }
}

pub fn augment<R: Rng + ?Sized>(s: &DepthSample, cfg: &AugmentConfig, rng: &mut R) -> DepthSample {
    let mut out = if rng.gen_bool(cfg.hflip_prob) { hflip(s) } else { s.clone() };
    if cfg.rotation_deg > 0.0 {
        let a = rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg);
        out = rotate(&out, a);
    }
    let contrast = draw(rng, cfg.contrast);
    let brightness = draw(rng, cfg.brightness);
    let color = [draw(rng, cfg.color), draw(rng, cfg.color), draw(rng, cfg.color)];
    photometric(&out, contrast, brightness, color)
}
