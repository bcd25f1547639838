use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GeneratorConfig, LabeledScene, ViewSample};
use crate::error::{bail, Result};
use crate::geometry::{point_f64, Camera};

/// Splats every point into the pixel it projects to; the nearest point wins
/// (ties to the lower index). Returns the view and, per pixel, the index of
/// the winning point.
pub fn render_camera(
    scene: &LabeledScene,
    camera: &Camera,
    view_index: usize,
    height: usize,
    width: usize,
) -> Result<(ViewSample, Vec<Option<usize>>)> {
    camera.validate()?;
    let void = scene.num_classes as u16;
    let mut zbuf: Vec<f64> = vec![f64::INFINITY; height * width];
    let mut source: Vec<Option<usize>> = vec![None; height * width];
    for (i, &p) in scene.points.iter().enumerate() {
        if let Some((r, c, z)) = camera.pixel_of(point_f64(p), height, width) {
            let px = r * width + c;
            if z < zbuf[px] {
                zbuf[px] = z;
                source[px] = Some(i);
            }
        }
    }
    let mut image = vec![0.0f32; height * width * 3];
    let mut pixel_labels = vec![void; height * width];
    let mut depth = vec![f32::INFINITY; height * width];
    for (px, s) in source.iter().enumerate() {
        if let Some(i) = *s {
            image[px * 3..px * 3 + 3].copy_from_slice(&scene.colors[i]);
            pixel_labels[px] = scene.labels[i];
            depth[px] = zbuf[px] as f32;
        }
    }
    let view = ViewSample {
        scene_id: scene.scene_id.clone(),
        view_index,
        camera: camera.clone(),
        height,
        width,
        image,
        pixel_labels,
        depth,
    };
    Ok((view, source))
}

/// Renders `n_views` views from random in-room poses on the open side of the
/// room, each looking at (a jittered) scene centroid.
pub fn render_views(scene: &LabeledScene, n_views: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Vec<ViewSample>> {
    if n_views == 0 {
        bail!(Config, "n_views must be at least 1");
    }
    let [h, w] = cfg.image_size;
    let focal = (w as f64 / 2.0) / (cfg.fov_deg.to_radians() / 2.0).tan();
    let n = scene.points.len() as f64;
    let centroid: [f64; 3] =
        std::array::from_fn(|a| scene.points.iter().map(|p| f64::from(p[a])).sum::<f64>() / n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe_f00d);
    let room = cfg.room;
    let mut views: Vec<ViewSample> = Vec::with_capacity(n_views);
    while views.len() < n_views {
        let eye = [
            rng.random_range(0.7..0.97) * room[0],
            rng.random_range(0.7..0.97) * room[1],
            rng.random_range(0.55..0.95) * room[2],
        ];
        let target: [f64; 3] = std::array::from_fn(|a| centroid[a] + rng.random_range(-0.08..0.08));
        let cam = Camera::look_at(eye, target, focal, focal, (w / 2) as f64, (h / 2) as f64)?;
        if views.iter().any(|v| v.camera == cam) {
            continue;
        }
        let (view, _) = render_camera(scene, &cam, views.len(), h, w)?;
        views.push(view);
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_of(points: Vec<[f32; 3]>, labels: Vec<u16>) -> LabeledScene {
        LabeledScene {
            scene_id: "t".into(),
            rng_seed: 0,
            num_classes: 6,
            colors: points.iter().enumerate().map(|(i, _)| [i as f32 * 0.1, 0.5, 0.5]).collect(),
            points,
            labels,
        }
    }

    #[test]
    fn single_point_on_axis_hits_principal_point() {
        let s = scene_of(vec![[0.0, 0.0, 1.0]], vec![4]);
        let cam = Camera::identity(20.0, 20.0, 8.0, 6.0);
        let (v, _) = render_camera(&s, &cam, 0, 12, 16).unwrap();
        let hit: Vec<usize> = (0..12 * 16).filter(|&p| !v.is_void(p)).collect();
        assert_eq!(hit, vec![6 * 16 + 8]);
        assert_eq!(v.pixel_labels[hit[0]], 4);
        assert_eq!(v.depth[hit[0]], 1.0);
        assert!(v.pixel_labels.iter().enumerate().all(|(p, &l)| p == hit[0] || l == 6));
    }

    #[test]
    fn nearer_point_wins_the_pixel() {
        let s = scene_of(vec![[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]], vec![1, 3]);
        let cam = Camera::identity(20.0, 20.0, 8.0, 8.0);
        let (v, src) = render_camera(&s, &cam, 0, 16, 16).unwrap();
        let px = 8 * 16 + 8;
        assert_eq!(v.pixel_labels[px], 3);
        assert_eq!(src[px], Some(1));
        assert_eq!(&v.image[px * 3..px * 3 + 3], &[0.1, 0.5, 0.5]);
    }

    #[test]
    fn three_views_have_distinct_poses() {
        let cfg = GeneratorConfig::default();
        let s = crate::scene::generate_scene(11, &cfg).unwrap();
        let views = render_views(&s, 3, 11, &cfg).unwrap();
        assert_eq!(views.len(), 3);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(views[i].camera, views[j].camera);
            }
        }
        // something must be visible from every pose
        assert!(views.iter().all(|v| (0..64 * 64).filter(|&p| !v.is_void(p)).count() > 500));
        assert!(render_views(&s, 0, 11, &cfg).is_err());
    }
}
