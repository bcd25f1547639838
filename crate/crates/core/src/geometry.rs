//! Pinhole projection, z-buffer visibility, point-pixel correspondences and
//! sparse-to-dense filling on the image plane.
//!
//! Pixel convention: a camera-frame point `q` lands on column
//! `floor(fx * qx / qz + cx + 0.5)` and row `floor(fy * qy / qz + cy + 0.5)`
//! (round half up). The renderer in [`crate::scene`] uses the same routine,
//! so correspondences reproduce its provenance exactly.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::scene::{LabeledScene, ViewSample};

/// Intrinsics in pixels plus world-to-camera extrinsics (`q = R p + t`).
/// Camera axes: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Camera {
    /// Camera at `eye` looking at `target`, with world +z as up.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Camera> {
        let f = normalize(sub3(target, eye))?;
        let right = normalize(cross(f, [0.0, 0.0, 1.0]))?;
        let down = cross(f, right);
        let rotation = [right, down, f];
        let translation = [0, 1, 2].map(|r| -dot(rotation[r], eye));
        let cam = Camera { fx, fy, cx, cy, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with identity extrinsics.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64) -> Camera {
        Camera {
            fx,
            fy,
            cx,
            cy,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Checks `R^T R = I` within 1e-9 and finite, positive focal lengths.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if !((v - want).abs() <= 1e-9) {
                    bail!(Argument, "camera rotation is not orthonormal (R^T R [{i}][{j}] = {v})");
                }
            }
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()) {
            bail!(Argument, "camera intrinsics must be positive and finite");
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            bail!(Argument, "camera translation must be finite");
        }
        Ok(())
    }

    pub fn to_camera_frame(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|r| dot(self.rotation[r], p) + self.translation[r])
    }

    /// Pixel `(row, col)` and depth of `p`, if it lies in front of the camera
    /// and inside a `height x width` image. Ignores occlusion.
    pub fn pixel_of(&self, p: [f64; 3], height: usize, width: usize) -> Option<(usize, usize, f64)> {
        let q = self.to_camera_frame(p);
        if !(q[2] > 0.0) {
            return None;
        }
        let u = self.fx * q[0] / q[2] + self.cx;
        let v = self.fy * q[1] / q[2] + self.cy;
        let col = (u + 0.5).floor();
        let row = (v + 0.5).floor();
        if !(col >= 0.0 && row >= 0.0 && col < width as f64 && row < height as f64) {
            return None;
        }
        Some((row as usize, col as usize, q[2]))
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> Result<[f64; 3]> {
    let n = dot(a, a).sqrt();
    if !(n > 1e-12) {
        bail!(Argument, "degenerate camera direction");
    }
    Ok(a.map(|v| v / n))
}

pub(crate) fn point_f64(p: [f32; 3]) -> [f64; 3] {
    p.map(f64::from)
}

/// Default relative depth tolerance of the visibility test.
pub const DEPTH_REL_TOL: f64 = 1e-4;
/// Default absolute depth tolerance of the visibility test.
pub const DEPTH_ABS_TOL: f64 = 1e-6;

/// Projection of one point into one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint {
    /// `(row, col)` when the point is in front of the camera and in bounds.
    pub pixel: Option<(usize, usize)>,
    /// Camera-frame z.
    pub depth: f64,
    /// In bounds, in front, and within depth tolerance of the z-buffer.
    pub visible: bool,
}

/// Projects every point into `view`; visibility compares each point's depth
/// against the view's depth buffer with tolerance `1e-4 * depth + 1e-6`.
pub fn project_points(points: &[[f32; 3]], view: &ViewSample) -> Result<Vec<ProjectedPoint>> {
    view.camera.validate()?;
    let (h, w) = (view.height, view.width);
    Ok(points
        .iter()
        .map(|&p| {
            let p = point_f64(p);
            let depth = view.camera.to_camera_frame(p)[2];
            match view.camera.pixel_of(p, h, w) {
                Some((r, c, z)) => {
                    let zbuf = f64::from(view.depth[r * w + c]);
                    let visible = (z - zbuf).abs() <= DEPTH_REL_TOL * z + DEPTH_ABS_TOL;
                    ProjectedPoint { pixel: Some((r, c)), depth, visible }
                }
                None => ProjectedPoint { pixel: None, depth, visible: false },
            }
        })
        .collect())
}

/// Point-pixel pairs of one view; each pixel appears at most once.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub scene_id: String,
    pub view_index: usize,
    pub height: usize,
    pub width: usize,
    /// Point index per pair.
    pub points: Vec<usize>,
    /// Flat pixel index (`row * width + col`) per pair.
    pub pixels: Vec<usize>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn row_col(&self, k: usize) -> (usize, usize) {
        (self.pixels[k] / self.width, self.pixels[k] % self.width)
    }
}

/// One pair per visible point. Where several points pass the depth test for
/// the same pixel, the nearest (then lowest index) wins, matching the
/// renderer's z-buffer. Pairs are ordered by point index.
pub fn build_pairs(scene: &LabeledScene, view: &ViewSample) -> Result<CorrespondenceSet> {
    if scene.scene_id != view.scene_id {
        bail!(Argument, "view belongs to scene {:?}, not {:?}", view.scene_id, scene.scene_id);
    }
    let proj = project_points(&scene.points, view)?;
    let w = view.width;
    let mut winner: Vec<Option<(f64, usize)>> = vec![None; view.height * w];
    for (i, p) in proj.iter().enumerate() {
        if !p.visible {
            continue;
        }
        let (r, c) = p.pixel.unwrap();
        let slot = &mut winner[r * w + c];
        if slot.is_none_or(|(d, _)| p.depth < d) {
            *slot = Some((p.depth, i));
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        winner.iter().enumerate().filter_map(|(px, s)| s.map(|(_, i)| (i, px))).collect();
    pairs.sort_unstable();
    Ok(CorrespondenceSet {
        scene_id: scene.scene_id.clone(),
        view_index: view.view_index,
        height: view.height,
        width: w,
        points: pairs.iter().map(|p| p.0).collect(),
        pixels: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Dense `height x width x channels` map with a per-pixel coverage flag.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub covered: Vec<bool>,
}

impl DenseMap {
    pub fn pixel(&self, px: usize) -> &[f64] {
        &self.values[px * self.channels..(px + 1) * self.channels]
    }
}

/// Places each pair's vector at its pixel, then fills every unprojected
/// pixel with the mean of the projected vectors inside its centred
/// `window x window` neighbourhood. Pixels with no projected neighbour are
/// left uncovered (zeros, `covered = false`).
///
/// `vectors` is `pairs.len() x channels`, row-major.
pub fn densify_on_image(vectors: &[f64], channels: usize, pairs: &CorrespondenceSet, window: usize) -> Result<DenseMap> {
    if window % 2 == 0 {
        bail!(Config, "densification window must be odd, got {window}");
    }
    if channels == 0 || vectors.len() != pairs.len() * channels {
        bail!(Argument, "densify: {} values for {} pairs of width {channels}", vectors.len(), pairs.len());
    }
    let (h, w, c) = (pairs.height, pairs.width, channels);
    let mut projected: Vec<Option<usize>> = vec![None; h * w];
    for (k, &px) in pairs.pixels.iter().enumerate() {
        projected[px] = Some(k);
    }
    let mut values = vec![0.0; h * w * c];
    let mut count = vec![0u32; h * w];
    let half = (window / 2) as isize;
    // Sources are visited in row-major pixel order so every target sums its
    // neighbours in the same order as a direct window scan would.
    for src in 0..h * w {
        let Some(k) = projected[src] else { continue };
        let v = &vectors[k * c..(k + 1) * c];
        let (r, col) = ((src / w) as isize, (src % w) as isize);
        for dr in -half..=half {
            let tr = r + dr;
            if tr < 0 || tr >= h as isize {
                continue;
            }
            for dc in -half..=half {
                let tc = col + dc;
                if tc < 0 || tc >= w as isize {
                    continue;
                }
                let t = tr as usize * w + tc as usize;
                if projected[t].is_some() {
                    continue;
                }
                values[t * c..(t + 1) * c].iter_mut().zip(v).for_each(|(a, b)| *a += b);
                count[t] += 1;
            }
        }
    }
    let mut covered = vec![false; h * w];
    for px in 0..h * w {
        if let Some(k) = projected[px] {
            values[px * c..(px + 1) * c].copy_from_slice(&vectors[k * c..(k + 1) * c]);
            covered[px] = true;
        } else if count[px] > 0 {
            let n = f64::from(count[px]);
            values[px * c..(px + 1) * c].iter_mut().for_each(|v| *v /= n);
            covered[px] = true;
        }
    }
    Ok(DenseMap { height: h, width: w, channels: c, values, covered })
}
