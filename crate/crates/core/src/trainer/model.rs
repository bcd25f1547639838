use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::branches::{BranchConfig, ImageStream, VoxelInput, VoxelStream};
use crate::dmf::{fuse_2d, fuse_3d, DmfConfig};
use crate::error::{bail, Result};
use crate::geometry::{build_pairs, densify_on_image, CorrespondenceSet};
use crate::scene::{LabeledScene, ViewSample};
use crate::tensor::{concat, gather_rows, scatter_mean_replace, softmax, ParamSet, Tensor};

/// Architecture of the two-branch network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub branches: BranchConfig,
    pub heads: usize,
    /// Whether the fusion blocks run; without them both branches are
    /// independent plain U-Nets.
    pub dmf: bool,
}

impl ModelConfig {
    pub fn dmf_config(&self) -> DmfConfig {
        DmfConfig { heads: self.heads, widths_3d: self.branches.fused_widths_3d(), widths_2d: self.branches.fused_widths_2d() }
    }

    pub fn validate(&self) -> Result<()> {
        self.branches.validate()?;
        self.dmf_config().validate()
    }

    /// Fresh parameters. Branch and fusion weights come from separate
    /// random streams, so toggling fusion leaves the branch weights alone.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        self.branches.init_params(&mut rng, &mut params)?;
        if self.dmf {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2);
            self.dmf_config().init(&mut rng, &mut params)?;
        }
        Ok(params)
    }
}

/// One view prepared for training and evaluation.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub pairs: CorrespondenceSet,
    /// Renderer labels (VOID = class count); used for evaluation only.
    pub eval_labels: Vec<usize>,
    /// Supervision targets projected from the 3D labels and densified;
    /// uncovered pixels carry the ignore label.
    pub targets: Vec<usize>,
}

/// One scene prepared for the two-branch network.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub id: String,
    pub num_classes: usize,
    pub voxels: VoxelInput,
    pub labels: Vec<usize>,
    pub views: Vec<ViewData>,
}

impl SceneData {
    pub fn prepare(
        scene: &LabeledScene,
        views: &[ViewSample],
        n_views: usize,
        room: [f64; 3],
        cfg: &BranchConfig,
        window: usize,
    ) -> Result<SceneData> {
        if views.len() < n_views {
            bail!(Config, "scene {} has {} views, {n_views} requested", scene.scene_id, views.len());
        }
        let c = scene.num_classes;
        if c != cfg.num_classes {
            bail!(Config, "scene {} has {c} classes, the model {}", scene.scene_id, cfg.num_classes);
        }
        let voxels = VoxelInput::from_points(&scene.points, &scene.colors, room, cfg)?;
        let labels: Vec<usize> = scene.labels.iter().map(|&l| usize::from(l)).collect();
        let views = views[..n_views]
            .iter()
            .map(|v| {
                let pairs = build_pairs(scene, v)?;
                Ok(ViewData {
                    height: v.height,
                    width: v.width,
                    image: v.image.iter().map(|&x| f64::from(x)).collect(),
                    targets: projected_targets(&labels, c, &pairs, window)?,
                    eval_labels: v.pixel_labels.iter().map(|&l| usize::from(l)).collect(),
                    pairs,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SceneData { id: scene.scene_id.clone(), num_classes: c, voxels, labels, views })
    }

    pub fn num_pairs(&self) -> usize {
        self.views.iter().map(|v| v.pairs.len()).sum()
    }
}

/// Image targets derived from point labels alone: one-hot rows at the
/// paired pixels, densified, argmax per covered pixel, `classes` elsewhere.
pub fn projected_targets(point_labels: &[usize], classes: usize, pairs: &CorrespondenceSet, window: usize) -> Result<Vec<usize>> {
    let mut onehot = vec![0.0; pairs.len() * classes];
    for (k, &p) in pairs.points.iter().enumerate() {
        onehot[k * classes + point_labels[p]] = 1.0;
    }
    let map = densify_on_image(&onehot, classes, pairs, window)?;
    Ok((0..map.height * map.width)
        .map(|px| {
            if !map.covered[px] {
                return classes;
            }
            let row = map.pixel(px);
            (1..classes).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect())
}

/// Outputs of both branches on one scene.
pub struct DualOutput {
    /// `N x C` per point.
    pub logits3: Tensor,
    pub probs3: Tensor,
    /// `H*W x C` per view.
    pub logits2: Vec<Tensor>,
    pub probs2: Vec<Tensor>,
}

impl DualOutput {
    /// Paired probability rows of all views, stacked: (3D rows, 2D rows).
    pub fn paired_probs(&self, scene: &SceneData) -> Result<Option<(Tensor, Tensor)>> {
        let mut rows3 = Vec::new();
        let mut rows2 = Vec::new();
        for (v, view) in scene.views.iter().enumerate() {
            if view.pairs.is_empty() {
                continue;
            }
            rows3.push(gather_rows(&self.probs3, &view.pairs.points)?);
            rows2.push(gather_rows(&self.probs2[v], &view.pairs.pixels)?);
        }
        if rows3.is_empty() {
            return Ok(None);
        }
        Ok(Some((concat(&rows3, 0)?, concat(&rows2, 0)?)))
    }
}

/// Runs both branches in lock-step. At every decoder scale each view's
/// pairs are fused in both directions: fused image features replace the
/// paired pixels' features, fused point features (averaged over views when
/// a point is paired in several) replace the points' features, and both are
/// scattered back before the next scale.
pub fn forward(cfg: &ModelConfig, params: &ParamSet, scene: &SceneData) -> Result<DualOutput> {
    let net3 = cfg.branches.unet_3d();
    let net2 = cfg.branches.unet_2d();
    let mut s3 = VoxelStream::begin(&net3, params, &scene.voxels)?;
    let mut s2 = scene
        .views
        .iter()
        .map(|v| ImageStream::begin(&net2, params, &v.image, v.height, v.width))
        .collect::<Result<Vec<_>>>()?;
    for scale in 0..net3.scales() {
        let points = s3.step()?;
        for s in &mut s2 {
            s.step()?;
        }
        if !cfg.dmf {
            continue;
        }
        let mut idx = Vec::new();
        let mut fused3 = Vec::new();
        for (view, s) in scene.views.iter().zip(&mut s2) {
            if view.pairs.is_empty() {
                continue;
            }
            let f2 = s.gather(&view.pairs.pixels)?;
            let f3 = gather_rows(&points, &view.pairs.points)?;
            s.scatter(&fuse_2d(&f2, &f3, params, cfg.heads, scale)?)?;
            fused3.push(fuse_3d(&f3, &f2, params, cfg.heads, scale)?);
            idx.extend_from_slice(&view.pairs.points);
        }
        if !idx.is_empty() {
            let merged = scatter_mean_replace(&points, &idx, &concat(&fused3, 0)?)?;
            s3.scatter(&merged)?;
        }
    }
    let logits3 = s3.head()?;
    let probs3 = softmax(&logits3, 1)?;
    let logits2 = s2.iter().map(|s| s.head()).collect::<Result<Vec<_>>>()?;
    let probs2 = logits2.iter().map(|l| softmax(l, 1)).collect::<Result<Vec<_>>>()?;
    Ok(DualOutput { logits3, probs3, logits2, probs2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branches::{forward_2d, forward_3d, identity_hook};
    use crate::scene::{generate_scene, render_views, GeneratorConfig};

    pub(crate) fn small_scene() -> (LabeledScene, Vec<ViewSample>, GeneratorConfig) {
        let cfg = GeneratorConfig { num_points: 600, image_size: [16, 16], n_views: 2, room: [0.8, 0.8, 0.5], ..Default::default() };
        let scene = generate_scene(3, &cfg).unwrap();
        let views = render_views(&scene, 2, 3, &cfg).unwrap();
        (scene, views, cfg)
    }

    fn small_model(dmf: bool) -> ModelConfig {
        ModelConfig {
            branches: BranchConfig { widths_3d: vec![4, 8], widths_2d: vec![4, 8], ..Default::default() },
            heads: 2,
            dmf,
        }
    }

    #[test]
    fn without_fusion_branches_are_independent_unets() {
        let (scene, views, g) = small_scene();
        let m = small_model(false);
        let sd = SceneData::prepare(&scene, &views, 2, g.room, &m.branches, 5).unwrap();
        let params = m.init_params(1).unwrap();
        let out = forward(&m, &params, &sd).unwrap();
        let o3 = forward_3d(&sd.voxels, &m.branches.unet_3d(), &params, &mut identity_hook).unwrap();
        assert_eq!(out.probs3.data(), o3.probs.data());
        let v = &sd.views[1];
        let o2 = forward_2d(&v.image, v.height, v.width, &[], &m.branches.unet_2d(), &params, &mut identity_hook).unwrap();
        assert_eq!(out.probs2[1].data(), o2.probs.data());
    }

    #[test]
    fn fusion_changes_outputs_and_keeps_branch_init() {
        let (scene, views, g) = small_scene();
        let sd = SceneData::prepare(&scene, &views, 2, g.room, &small_model(true).branches, 5).unwrap();
        assert!(sd.num_pairs() > 0);
        let p_plain = small_model(false).init_params(4).unwrap();
        let p_fused = small_model(true).init_params(4).unwrap();
        for (name, t) in p_plain.iter() {
            assert_eq!(p_fused.get(name).unwrap().data(), t.data());
        }
        let a = forward(&small_model(false), &p_plain, &sd).unwrap();
        let b = forward(&small_model(true), &p_fused, &sd).unwrap();
        assert_ne!(a.probs3.data(), b.probs3.data());
        for row in b.probs2[0].data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn image_targets_come_from_point_labels_only() {
        let (scene, mut views, g) = small_scene();
        let m = small_model(false);
        let a = SceneData::prepare(&scene, &views, 2, g.room, &m.branches, 5).unwrap();
        for v in &mut views {
            v.pixel_labels.iter_mut().for_each(|l| *l = 0);
        }
        let b = SceneData::prepare(&scene, &views, 2, g.room, &m.branches, 5).unwrap();
        assert_eq!(a.views[0].targets, b.views[0].targets);
        // paired pixels carry their point's label
        let v = &a.views[0];
        for (&p, &px) in v.pairs.points.iter().zip(&v.pairs.pixels) {
            assert_eq!(v.targets[px], a.labels[p]);
        }
    }
}
