//! Procedural labeled scenes: a room corner (floor + two walls) with box,
//! cylinder and sphere objects, sampled as a colored point cloud and
//! rendered from several pinhole cameras by z-buffered point splatting.
//!
//! Classes `0` and `1` are floor and wall; object classes cycle through
//! box, cylinder, sphere. Base colors are chosen so that some classes are
//! separable only by color (the two box classes) and others only by shape
//! (cylinder vs sphere, floor vs wall).

mod io;
mod render;
mod split;

pub use io::{read_dataset, write_dataset, Dataset, DatasetManifest, SceneEntry, Split};
pub use render::{render_camera, render_views};
pub use split::split_dataset;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::Camera;

/// A colored point cloud with per-point class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub scene_id: String,
    pub rng_seed: u64,
    pub num_classes: usize,
    /// Meters, inside `[0, room)` per axis.
    pub points: Vec<[f32; 3]>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<[f32; 3]>,
    pub labels: Vec<u16>,
}

/// One rendered view: camera, RGB image, per-pixel labels and depth.
/// Unhit pixels carry the VOID label (`num_classes`) and infinite depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSample {
    pub scene_id: String,
    pub view_index: usize,
    pub camera: Camera,
    pub height: usize,
    pub width: usize,
    /// `height * width * 3`, row-major.
    pub image: Vec<f32>,
    pub pixel_labels: Vec<u16>,
    pub depth: Vec<f32>,
}

impl ViewSample {
    pub fn is_void(&self, px: usize) -> bool {
        self.depth[px].is_infinite()
    }
}

/// Generator settings. Defaults are the desk-scale dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    /// Room extents (x, y, z) in meters.
    pub room: [f64; 3],
    pub num_points: usize,
    /// Inclusive range of instances per object class.
    pub objects_per_class: [usize; 2],
    /// Target share of points per class; `None` gives floor and wall a
    /// quarter each and splits the rest evenly.
    pub class_shares: Option<Vec<f64>>,
    /// Std-dev of per-point color noise.
    pub color_noise: f64,
    /// Per-scene brightness factor range.
    pub brightness: [f64; 2],
    /// Image size (height, width).
    pub image_size: [usize; 2],
    pub n_views: usize,
    pub fov_deg: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 6,
            room: [1.6, 1.6, 0.8],
            num_points: 4096,
            objects_per_class: [1, 2],
            class_shares: None,
            color_noise: 0.06,
            brightness: [0.75, 1.25],
            image_size: [64, 64],
            n_views: 3,
            fov_deg: 75.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {}", self.num_classes);
        }
        if self.num_classes > 2 && (self.objects_per_class[0] == 0 || self.objects_per_class[1] < self.objects_per_class[0]) {
            bail!(Config, "objects_per_class {:?} would leave object classes without primitives", self.objects_per_class);
        }
        if self.room.iter().any(|&r| !(r >= 0.5)) {
            bail!(Config, "room extents must be at least 0.5 m, got {:?}", self.room);
        }
        if self.num_points < self.num_classes {
            bail!(Config, "num_points {} is below the class count", self.num_points);
        }
        if let Some(s) = &self.class_shares {
            if s.len() != self.num_classes || s.iter().any(|&v| !(v > 0.0)) {
                bail!(Config, "class_shares must hold {} positive values", self.num_classes);
            }
        }
        if self.image_size.iter().any(|&v| v == 0) || self.n_views == 0 {
            bail!(Config, "image size and view count must be positive");
        }
        if !(self.fov_deg > 10.0 && self.fov_deg < 170.0) {
            bail!(Config, "fov_deg must be in (10, 170)");
        }
        if !(self.color_noise >= 0.0) || !(self.brightness[0] > 0.0 && self.brightness[1] >= self.brightness[0]) {
            bail!(Config, "invalid color noise / brightness settings");
        }
        Ok(())
    }

    /// Normalized target share per class.
    pub fn target_shares(&self) -> Vec<f64> {
        let raw = match &self.class_shares {
            Some(s) => s.clone(),
            None if self.num_classes == 2 => vec![0.5, 0.5],
            None => {
                let obj = 0.5 / (self.num_classes - 2) as f64;
                let mut v = vec![0.25, 0.25];
                v.extend(std::iter::repeat_n(obj, self.num_classes - 2));
                v
            }
        };
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Floor,
    Wall,
    Box,
    Cylinder,
    Sphere,
}

fn class_shape(class: usize) -> Shape {
    match class {
        0 => Shape::Floor,
        1 => Shape::Wall,
        c => [Shape::Box, Shape::Cylinder, Shape::Sphere][(c - 2) % 3],
    }
}

/// Base RGB per class.
pub fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.55, 0.50, 0.45],
        [0.60, 0.56, 0.50],
        [0.78, 0.30, 0.25],
        [0.25, 0.40, 0.78],
        [0.28, 0.43, 0.74],
        [0.30, 0.68, 0.32],
    ];
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    // Deterministic spread for larger class counts.
    let h = (class as f64 * 0.618_033_988_75).fract();
    [0.3 + 0.5 * h, 0.3 + 0.5 * (1.0 - h), 0.3 + 0.5 * (h * 2.0).fract()]
}

#[derive(Clone, Debug)]
struct Primitive {
    class: usize,
    shape: Shape,
    /// Footprint centre (x, y).
    centre: [f64; 2],
    /// Box: (half-x, half-y, height). Cylinder: (radius, -, height). Sphere: (radius, -, -).
    size: [f64; 3],
}

impl Primitive {
    fn area(&self, room: [f64; 3]) -> f64 {
        use std::f64::consts::PI;
        let [a, b, h] = self.size;
        match self.shape {
            Shape::Floor => room[0] * room[1],
            Shape::Wall => (room[0] + room[1]) * room[2],
            Shape::Box => 4.0 * a * b + 2.0 * (2.0 * a + 2.0 * b) * h,
            Shape::Cylinder => PI * a * a + 2.0 * PI * a * h,
            Shape::Sphere => 4.0 * PI * a * a,
        }
    }

    fn footprint_radius(&self) -> f64 {
        match self.shape {
            Shape::Box => self.size[0].hypot(self.size[1]),
            _ => self.size[0],
        }
    }

    fn sample(&self, room: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
        let eps = 1e-4;
        let [cx, cy] = self.centre;
        let [a, b, h] = self.size;
        match self.shape {
            Shape::Floor => [rng.random::<f64>() * (room[0] - eps), rng.random::<f64>() * (room[1] - eps), 0.0],
            Shape::Wall => {
                let z = rng.random::<f64>() * (room[2] - eps);
                if rng.random::<f64>() * (room[0] + room[1]) < room[1] {
                    [0.0, rng.random::<f64>() * (room[1] - eps), z]
                } else {
                    [rng.random::<f64>() * (room[0] - eps), 0.0, z]
                }
            }
            Shape::Box => {
                let top = 4.0 * a * b;
                let sx = 2.0 * b * h;
                let sy = 2.0 * a * h;
                let pick = rng.random::<f64>() * (top + 2.0 * sx + 2.0 * sy);
                let u = rng.random::<f64>() * 2.0 - 1.0;
                let v = rng.random::<f64>();
                if pick < top {
                    [cx + u * a, cy + (rng.random::<f64>() * 2.0 - 1.0) * b, h]
                } else if pick < top + 2.0 * sx {
                    let side = if pick < top + sx { -a } else { a };
                    [cx + side, cy + u * b, v * h]
                } else {
                    let side = if pick < top + 2.0 * sx + sy { -b } else { b };
                    [cx + u * a, cy + side, v * h]
                }
            }
            Shape::Cylinder => {
                use std::f64::consts::PI;
                let top = PI * a * a;
                let side = 2.0 * PI * a * h;
                let theta = rng.random::<f64>() * 2.0 * PI;
                if rng.random::<f64>() * (top + side) < top {
                    let r = a * rng.random::<f64>().sqrt();
                    [cx + r * theta.cos(), cy + r * theta.sin(), h]
                } else {
                    [cx + a * theta.cos(), cy + a * theta.sin(), rng.random::<f64>() * h]
                }
            }
            Shape::Sphere => {
                let n = Normal::new(0.0, 1.0).unwrap();
                loop {
                    let d: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
                    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    if len > 1e-9 {
                        break [cx + a * d[0] / len, cy + a * d[1] / len, a + a * d[2] / len];
                    }
                }
            }
        }
    }
}

/// Splits `total` into integer parts proportional to `weights`
/// (largest remainder, ties to the lower index).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let (fi, fj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

fn place_objects(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let room = cfg.room;
    let mut placed: Vec<Primitive> = Vec::new();
    for class in 2..cfg.num_classes {
        let count = rng.random_range(cfg.objects_per_class[0]..=cfg.objects_per_class[1]);
        for _ in 0..count {
            let shape = class_shape(class);
            let size = match shape {
                Shape::Box => [rng.random_range(0.08..0.2), rng.random_range(0.08..0.2), rng.random_range(0.12..0.4)],
                Shape::Cylinder => [rng.random_range(0.07..0.16), 0.0, rng.random_range(0.15..0.45)],
                _ => [rng.random_range(0.08..0.18), 0.0, 0.0],
            };
            let mut prim = Primitive { class, shape, centre: [0.0; 2], size };
            let r = prim.footprint_radius();
            let margin = 0.05;
            for attempt in 0..64 {
                prim.centre = [
                    rng.random_range(r + margin..room[0] - r - margin),
                    rng.random_range(r + margin..room[1] - r - margin),
                ];
                let clear = placed.iter().all(|q| {
                    let d = (q.centre[0] - prim.centre[0]).hypot(q.centre[1] - prim.centre[1]);
                    d > q.footprint_radius() + r + 0.02
                });
                if clear || attempt == 63 {
                    break;
                }
            }
            placed.push(prim);
        }
    }
    placed
}

/// Builds one scene; deterministic in `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> Result<LabeledScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = cfg.room;
    let mut prims = vec![
        Primitive { class: 0, shape: Shape::Floor, centre: [0.0; 2], size: [0.0; 3] },
        Primitive { class: 1, shape: Shape::Wall, centre: [0.0; 2], size: [0.0; 3] },
    ];
    prims.extend(place_objects(cfg, &mut rng));

    let per_class = apportion(cfg.num_points, &cfg.target_shares());
    let brightness = rng.random_range(cfg.brightness[0]..=cfg.brightness[1]);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let noise = Normal::new(0.0, cfg.color_noise).map_err(|e| crate::Error::Config(e.to_string()))?;

    let mut points = Vec::with_capacity(cfg.num_points);
    let mut colors = Vec::with_capacity(cfg.num_points);
    let mut labels = Vec::with_capacity(cfg.num_points);
    for (class, &n_class) in per_class.iter().enumerate() {
        let members: Vec<&Primitive> = prims.iter().filter(|p| p.class == class).collect();
        let areas: Vec<f64> = members.iter().map(|p| p.area(room)).collect();
        let base = class_color(class);
        for (prim, n) in members.iter().zip(apportion(n_class, &areas)) {
            for _ in 0..n {
                let p = prim.sample(room, &mut rng);
                let p: [f32; 3] = std::array::from_fn(|a| p[a].clamp(0.0, room[a] - 1e-4) as f32);
                let c: [f32; 3] = std::array::from_fn(|k| {
                    let v = base[k] * brightness + tint[k] + noise.sample(&mut rng);
                    v.clamp(0.0, 1.0) as f32
                });
                points.push(p);
                colors.push(c);
                labels.push(class as u16);
            }
        }
    }
    Ok(LabeledScene {
        scene_id: format!("scene_{seed:06}"),
        rng_seed: seed,
        num_classes: cfg.num_classes,
        points,
        colors,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let cfg = GeneratorConfig::default();
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
        assert_ne!(generate_scene(7, &cfg).unwrap().points, generate_scene(8, &cfg).unwrap().points);
    }

    #[test]
    fn labels_colors_and_bounds_valid() {
        let cfg = GeneratorConfig::default();
        let s = generate_scene(3, &cfg).unwrap();
        assert_eq!(s.points.len(), cfg.num_points);
        assert!(s.labels.iter().all(|&l| (l as usize) < 6));
        assert!(s.colors.iter().flatten().all(|&c| (0.0..=1.0).contains(&c)));
        for p in &s.points {
            for a in 0..3 {
                assert!(p[a] >= 0.0 && (p[a] as f64) < cfg.room[a]);
            }
        }
    }

    #[test]
    fn config_errors() {
        let cfg = GeneratorConfig { num_classes: 1, ..Default::default() };
        assert!(matches!(generate_scene(0, &cfg), Err(crate::Error::Config(_))));
        let cfg = GeneratorConfig { objects_per_class: [0, 0], ..Default::default() };
        assert!(matches!(generate_scene(0, &cfg), Err(crate::Error::Config(_))));
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(4096, &[0.25, 0.25, 0.125, 0.125, 0.125, 0.125]).iter().sum::<usize>(), 4096);
    }
}
