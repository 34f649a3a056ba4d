use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DepthSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn normalize(a: V3) -> V3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub albedo: V3,
    /// Checker cell size in meters; 0 disables the pattern.
    pub checker: f64,
}

/// Scene geometry in camera coordinates: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Plane { point: V3, normal: V3, material: Material },
    Sphere { center: V3, radius: f64, material: Material },
    /// Axis-aligned.
    Cuboid { min: V3, max: V3, material: Material },
}

impl Primitive {
    fn material(&self) -> &Material {
        match self {
            Primitive::Plane { material, .. } | Primitive::Sphere { material, .. } | Primitive::Cuboid { material, .. } => {
                material
            }
        }
    }

    /// Nearest positive ray parameter along `d` from the origin and the
    /// surface normal there.
    fn intersect(&self, d: V3) -> Option<(f64, V3)> {
        const MIN_T: f64 = 1e-9;
        match *self {
            Primitive::Plane { point, normal, .. } => {
                let den = dot(normal, d);
                if den == 0.0 {
                    return None;
                }
                let t = dot(normal, point) / den;
                (t > MIN_T).then_some((t, normal))
            }
            Primitive::Sphere { center, radius, .. } => {
                let a = dot(d, d);
                let b = dot(d, center);
                let c = dot(center, center) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = [(b - s) / a, (b + s) / a].into_iter().find(|&t| t > MIN_T)?;
                Some((t, normalize(sub(scale(d, t), center))))
            }
            Primitive::Cuboid { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis_in = 0;
                for ax in 0..3 {
                    if d[ax] == 0.0 {
                        if 0.0 < min[ax] || 0.0 > max[ax] {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = (min[ax] / d[ax], max[ax] / d[ax]);
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    if lo > t0 {
                        t0 = lo;
                        axis_in = ax;
                    }
                    t1 = t1.min(hi);
                }
                if t0 > t1 || t0 <= MIN_T {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis_in] = -d[axis_in].signum();
                Some((t0, n))
            }
        }
    }
}

/// Everything needed to render one synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Direction the light travels.
    pub light_dir: V3,
    pub max_depth: f64,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    /// A room: back wall, floor, optional ceiling and side walls, with a few
    /// spheres and boxes in front of the back wall. Sizes scale with
    /// `max_depth`.
    pub fn random(seed: u64, width: usize, height: usize, max_depth: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = max_depth / 10.0;
        let mat = |rng: &mut ChaCha8Rng, checker: bool| Material {
            albedo: [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)],
            checker: if checker { rng.gen_range(0.4..1.2) * s } else { 0.0 },
        };
        let back = rng.gen_range(0.6..0.95) * max_depth;
        let mut prims = vec![Primitive::Plane { point: [0.0, 0.0, back], normal: [0.0, 0.0, -1.0], material: mat(&mut rng, true) }];
        let floor = rng.gen_range(0.8..1.6) * s;
        prims.push(Primitive::Plane { point: [0.0, floor, 0.0], normal: [0.0, -1.0, 0.0], material: mat(&mut rng, true) });
        if rng.gen_bool(0.5) {
            let ceil = -rng.gen_range(1.2..2.2) * s;
            prims.push(Primitive::Plane { point: [0.0, ceil, 0.0], normal: [0.0, 1.0, 0.0], material: mat(&mut rng, false) });
        }
        for side in [-1.0, 1.0] {
            if rng.gen_bool(0.6) {
                let x = side * rng.gen_range(1.5..3.0) * s;
                prims.push(Primitive::Plane { point: [x, 0.0, 0.0], normal: [-side, 0.0, 0.0], material: mat(&mut rng, true) });
            }
        }
        let half_w = width as f64 / (2.0 * Self::default_focal(width));
        for _ in 0..rng.gen_range(1..=3) {
            let z = rng.gen_range(0.25..0.75) * back;
            let r = rng.gen_range(0.3..0.9) * s;
            let x = rng.gen_range(-0.6..0.6) * half_w * z;
            let y = rng.gen_range(-0.5..0.5) * half_w * z;
            prims.push(Primitive::Sphere { center: [x, y, z], radius: r, material: mat(&mut rng, false) });
        }
        for _ in 0..rng.gen_range(0..=2) {
            let z = rng.gen_range(0.3..0.8) * back;
            let x = rng.gen_range(-0.6..0.6) * half_w * z;
            let (w, h, d) = (rng.gen_range(0.4..1.2) * s, rng.gen_range(0.3..1.0) * s, rng.gen_range(0.4..1.2) * s);
            prims.push(Primitive::Cuboid {
                min: [x - w / 2.0, floor - h, z - d / 2.0],
                max: [x + w / 2.0, floor, z + d / 2.0],
                material: mat(&mut rng, false),
            });
        }
        let light_dir = normalize([rng.gen_range(-0.6..0.6), rng.gen_range(0.4..1.0), rng.gen_range(0.2..1.0)]);
        SceneSpec { seed, width, height, focal: Self::default_focal(width), light_dir, max_depth, primitives: prims }
    }

    /// Roughly a 58° horizontal field of view.
    pub fn default_focal(width: usize) -> f64 {
        0.9 * width as f64
    }

    /// Ray through pixel `(row, col)`; its z component is 1, so the ray
    /// parameter of a hit is its z-depth.
    pub fn ray(&self, row: usize, col: usize) -> V3 {
        [
            (col as f64 - self.width as f64 / 2.0) / self.focal,
            (row as f64 - self.height as f64 / 2.0) / self.focal,
            1.0,
        ]
    }
}

fn checker(p: V3, cell: f64) -> f64 {
    if cell <= 0.0 {
        return 1.0;
    }
    let k: i64 = p.iter().map(|v| (v / cell).floor() as i64).sum();
    if k.rem_euclid(2) == 0 {
        1.0
    } else {
        0.6
    }
}

/// Ray-casts z-depth of the nearest primitive per pixel and shades it with
/// ambient plus Lambertian light, a checker texture and distance falloff.
pub fn synth_scene(spec: &SceneSpec) -> Result<DepthSample> {
    if spec.primitives.is_empty() {
        return Err(Error::config("scene has no primitives"));
    }
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 || w % 32 != 0 || h % 32 != 0 {
        return Err(Error::config(format!("scene extents {w}×{h} must be positive multiples of 32")));
    }
    if !(spec.max_depth > 0.0) || !(spec.focal > 0.0) {
        return Err(Error::config("scene max_depth and focal must be > 0"));
    }
    let to_light = scale(normalize(spec.light_dir), -1.0);
    let mut rgb = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let d = spec.ray(r, c);
            let hit = spec
                .primitives
                .iter()
                .filter_map(|p| p.intersect(d).map(|(t, n)| (t, n, p)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let Some((t, mut n, prim)) = hit else {
                return Err(Error::config(format!("pixel ({r}, {c}) hits no primitive")));
            };
            if t > spec.max_depth {
                return Err(Error::config(format!("pixel ({r}, {c}) depth {t} exceeds max_depth {}", spec.max_depth)));
            }
            if dot(n, d) > 0.0 {
                n = scale(n, -1.0);
            }
            let m = prim.material();
            let lambert = dot(n, to_light).max(0.0);
            let falloff = (-0.8 * t / spec.max_depth).exp();
            let shade = (0.25 + 0.75 * lambert) * falloff * checker(scale(d, t), m.checker);
            for ch in 0..3 {
                rgb[(ch * h + r) * w + c] = (m.albedo[ch] * shade).clamp(0.0, 1.0);
            }
            depth[r * w + c] = t;
        }
    }
    DepthSample::new(Tensor::new(&[3, h, w], rgb)?, Tensor::new(&[1, h, w], depth)?, vec![true; h * w])
}
