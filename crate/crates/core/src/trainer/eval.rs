use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ema::constants;
use super::model::{forward, ModelConfig, SceneData};
use crate::error::{bail, Result};
use crate::metrics::{compute_metrics, ConfusionMatrix, ModalityMetrics};
use crate::tensor::ParamSnapshot;

/// Validation scores of one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics_3d: ModalityMetrics,
    pub metrics_2d: ModalityMetrics,
    /// Mean L2 distance between paired 3D and 2D probability rows.
    pub paired_l2: f64,
    #[serde(skip)]
    pub cms: Option<(ConfusionMatrix, ConfusionMatrix)>,
}

impl EvalReport {
    /// Mean of the two modalities' mIoU.
    pub fn mean_miou(&self) -> f64 {
        0.5 * (self.metrics_3d.metrics.miou + self.metrics_2d.metrics.miou)
    }
}

struct SceneCounts {
    cm3: ConfusionMatrix,
    cm2: ConfusionMatrix,
    l2_sum: f64,
    pairs: usize,
}

fn argmax_rows(data: &[f64], c: usize) -> Vec<usize> {
    data.chunks_exact(c).map(|r| (1..c).fold(0, |b, k| if r[k] > r[b] { k } else { b })).collect()
}

fn score_scene(cfg: &ModelConfig, snapshot: &ParamSnapshot, scene: &SceneData) -> Result<SceneCounts> {
    let params = constants(&snapshot.to_params())?;
    let out = forward(cfg, &params, scene)?;
    let c = scene.num_classes;
    let mut cm3 = ConfusionMatrix::new(c);
    cm3.accumulate(&scene.labels, &argmax_rows(out.probs3.data(), c), c)?;
    let mut cm2 = ConfusionMatrix::new(c);
    let (mut l2_sum, mut pairs) = (0.0, 0);
    let p3 = out.probs3.data();
    for (v, view) in scene.views.iter().enumerate() {
        let p2 = out.probs2[v].data();
        cm2.accumulate(&view.eval_labels, &argmax_rows(p2, c), c)?;
        for (&p, &px) in view.pairs.points.iter().zip(&view.pairs.pixels) {
            let d: f64 = (0..c).map(|k| (p3[p * c + k] - p2[px * c + k]).powi(2)).sum();
            l2_sum += d.sqrt();
        }
        pairs += view.pairs.len();
    }
    Ok(SceneCounts { cm3, cm2, l2_sum, pairs })
}

/// Scores all points and all non-VOID pixels of `scenes`. Scenes run in
/// parallel; counts are merged in scene order, so results do not depend on
/// the thread count.
pub fn evaluate(cfg: &ModelConfig, snapshot: &ParamSnapshot, scenes: &[SceneData]) -> Result<EvalReport> {
    let Some(first) = scenes.first() else {
        bail!(Evaluation, "no scenes to evaluate");
    };
    let c = first.num_classes;
    let parts: Vec<SceneCounts> = scenes.par_iter().map(|s| score_scene(cfg, snapshot, s)).collect::<Result<_>>()?;
    let (mut cm3, mut cm2) = (ConfusionMatrix::new(c), ConfusionMatrix::new(c));
    let (mut l2_sum, mut pairs) = (0.0, 0);
    for p in &parts {
        cm3.merge(&p.cm3)?;
        cm2.merge(&p.cm2)?;
        l2_sum += p.l2_sum;
        pairs += p.pairs;
    }
    Ok(EvalReport {
        metrics_3d: ModalityMetrics { modality: "3d".into(), metrics: compute_metrics(&cm3)? },
        metrics_2d: ModalityMetrics { modality: "2d".into(), metrics: compute_metrics(&cm2)? },
        paired_l2: if pairs == 0 { 0.0 } else { l2_sum / pairs as f64 },
        cms: Some((cm3, cm2)),
    })
}
