use std::fs;
use std::path::{Path, PathBuf};

use super::{load_raster, save_raster, synth_scene, DepthSample, Raster, SceneSpec};
use crate::error::{Error, Result};

const RGB_SUFFIX: &str = ".rgb.drf";
const DEPTH_SUFFIX: &str = ".depth.drf";

fn paths(root: &Path, split: &str, id: &str) -> (PathBuf, PathBuf) {
    let dir = root.join(split);
    (dir.join(format!("{id}{RGB_SUFFIX}")), dir.join(format!("{id}{DEPTH_SUFFIX}")))
}

/// Writes `<root>/<split>/<id>.rgb.drf` and `<id>.depth.drf`. Masked-out
/// pixels are stored with depth 0.
pub fn save_sample(root: &Path, split: &str, id: &str, s: &DepthSample) -> Result<()> {
    fs::create_dir_all(root.join(split))?;
    let (rgb_p, depth_p) = paths(root, split, id);
    save_raster(rgb_p, &Raster::from_tensor(&s.rgb)?)?;
    let mut depth = s.depth.clone();
    for (d, &m) in depth.data_mut().iter_mut().zip(&s.mask) {
        if !m {
            *d = 0.0;
        }
    }
    save_raster(depth_p, &Raster::from_tensor(&depth)?)
}

/// Depth ≤ 0 marks an invalid pixel.
pub fn load_sample(root: &Path, split: &str, id: &str) -> Result<DepthSample> {
    let (rgb_p, depth_p) = paths(root, split, id);
    let rgb = load_raster(&rgb_p)?;
    let depth = load_raster(&depth_p)?;
    if rgb.channels != 3 || depth.channels != 1 || (rgb.width, rgb.height) != (depth.width, depth.height) {
        return Err(Error::shape(
            "load_sample",
            format!("{id}: need a 3-channel image and a 1-channel depth of equal extents"),
            &[
                &[rgb.channels as usize, rgb.height as usize, rgb.width as usize],
                &[depth.channels as usize, depth.height as usize, depth.width as usize],
            ],
        ));
    }
    DepthSample::from_rgb_depth(rgb.to_tensor()?, depth.to_tensor()?)
}

/// Sample ids present in `<root>/<split>`, sorted.
pub fn list_ids(root: &Path, split: &str) -> Result<Vec<String>> {
    let dir = root.join(split);
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(RGB_SUFFIX)) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Renders `count` random scenes with seeds `seed, seed+1, …` into `split`.
pub fn generate_dataset(
    root: &Path,
    split: &str,
    count: usize,
    seed: u64,
    width: usize,
    height: usize,
    max_depth: f64,
) -> Result<Vec<String>> {
    (0..count)
        .map(|i| {
            let id = format!("{i:05}");
            let s = synth_scene(&SceneSpec::random(seed + i as u64, width, height, max_depth))?;
            save_sample(root, split, &id, &s)?;
            Ok(id)
        })
        .collect()
}

/// All samples of one split, in id order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub samples: Vec<DepthSample>,
}

impl Dataset {
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let ids = list_ids(root, split)?;
        if ids.is_empty() {
            return Err(Error::config(format!("no samples in {}", root.join(split).display())));
        }
        let samples = ids.iter().map(|id| load_sample(root, split, id)).collect::<Result<_>>()?;
        Ok(Dataset { ids, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
