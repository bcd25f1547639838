//! Pseudo-label filtering by cross-modal voting and confidence.
//!
//! The teacher's argmax labels ("coarse" labels) are kept when the other
//! modality votes for the same class, or when the teacher's own probability
//! for that class exceeds `t_conf`. Everything else is deleted (`None`) and
//! later ignored by the loss. The rules never swap in a different class.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{bail, Result};
use crate::geometry::{densify_on_image, CorrespondenceSet};

/// Largest allowed deviation of a probability row's sum from 1.
pub const ROW_SUM_TOL: f64 = 1e-4;

/// Coarse labels, confidences, cross-modal votes and the filtered result
/// for one modality. All vectors are aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub coarse: Vec<usize>,
    pub confidence: Vec<f64>,
    /// The other modality's class for this element, if it has one.
    pub vote: Vec<Option<usize>>,
    /// Retained class, or `None` when deleted.
    pub optimized: Vec<Option<usize>>,
}

impl PseudoLabelSet {
    pub fn retained(&self) -> usize {
        self.optimized.iter().filter(|o| o.is_some()).count()
    }

    /// Labels with deleted entries mapped to `ignore`.
    pub fn targets(&self, ignore: usize) -> Vec<usize> {
        self.optimized.iter().map(|o| o.unwrap_or(ignore)).collect()
    }
}

/// Argmax (lowest index on ties) and its probability for each row of a
/// row-major `rows x classes` probability matrix.
pub fn extract_coarse(probs: &[f64], classes: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if classes == 0 || probs.len() % classes != 0 {
        bail!(Argument, "{} probabilities do not form rows of {classes}", probs.len());
    }
    let mut labels = Vec::with_capacity(probs.len() / classes);
    let mut conf = Vec::with_capacity(probs.len() / classes);
    for (i, row) in probs.chunks_exact(classes).enumerate() {
        let total: f64 = row.iter().sum();
        if !((total - 1.0).abs() <= ROW_SUM_TOL) {
            bail!(Contract, "row {i} is not a probability distribution (sums to {total})");
        }
        let (k, p) = argmax(row);
        labels.push(k);
        conf.push(p);
    }
    Ok((labels, conf))
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Keep `coarse` if the vote agrees or `confidence > t_conf`.
#[inline]
pub fn retain(coarse: usize, vote: Option<usize>, confidence: f64, t_conf: f64) -> Option<usize> {
    (vote == Some(coarse) || confidence > t_conf).then_some(coarse)
}

fn apply(coarse: &[usize], votes: &[Option<usize>], conf: &[f64], t_conf: f64) -> Vec<Option<usize>> {
    assert!(coarse.len() == votes.len() && coarse.len() == conf.len(), "pseudo-label arrays must be aligned");
    coarse.iter().zip(votes).zip(conf).map(|((&c, &v), &g)| retain(c, v, g, t_conf)).collect()
}

/// 3D rule: the vote is the image label carried to the paired point.
pub fn optimize_3d(coarse_3d: &[usize], projected_3d: &[Option<usize>], conf_3d: &[f64], t_conf: f64) -> Vec<Option<usize>> {
    apply(coarse_3d, projected_3d, conf_3d, t_conf)
}

/// 2D rule: the vote is the densified 3D class at the pixel; pixels without
/// one are decided by confidence alone.
pub fn optimize_2d(coarse_2d: &[usize], densified_2d: &[Option<usize>], conf_2d: &[f64], t_conf: f64) -> Vec<Option<usize>> {
    apply(coarse_2d, densified_2d, conf_2d, t_conf)
}

/// Dense per-pixel 3D vote: each pair's 3D probability row is placed at its
/// pixel, unprojected pixels average the rows in their window, and the
/// argmax of the pooled row is the vote. Uncovered pixels get `None`.
///
/// `pair_probs` is `pairs.len() x classes`.
pub fn densify_2d_pseudo(pair_probs: &[f64], classes: usize, pairs: &CorrespondenceSet, window: usize) -> Result<Vec<Option<usize>>> {
    let map = densify_on_image(pair_probs, classes, pairs, window)?;
    Ok((0..map.height * map.width)
        .map(|px| map.covered[px].then(|| argmax(map.pixel(px)).0))
        .collect())
}

/// Builds a filtered set from teacher probabilities and aligned votes.
pub fn build_set(probs: &[f64], classes: usize, vote: Vec<Option<usize>>, t_conf: f64) -> Result<PseudoLabelSet> {
    let (coarse, confidence) = extract_coarse(probs, classes)?;
    if vote.len() != coarse.len() {
        bail!(Argument, "{} votes for {} elements", vote.len(), coarse.len());
    }
    let optimized = apply(&coarse, &vote, &confidence, t_conf);
    Ok(PseudoLabelSet { coarse, confidence, vote, optimized })
}

/// Per-point 3D votes from several views: a point's vote is its own coarse
/// class if any view's paired pixel carries that class, else the first
/// view's disagreeing label, else `None` (unpaired).
pub fn point_votes(coarse_3d: &[usize], views: &[(&[usize], Vec<usize>)]) -> Vec<Option<usize>> {
    let mut vote: Vec<Option<usize>> = vec![None; coarse_3d.len()];
    for (points, labels) in views {
        for (&p, &l) in points.iter().zip(labels) {
            if vote[p] != Some(coarse_3d[p]) && (vote[p].is_none() || l == coarse_3d[p]) {
                vote[p] = Some(l);
            }
        }
    }
    vote
}

/// Retained/deleted counts per coarse class, for debug dumps.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PloStats {
    pub retained: BTreeMap<usize, usize>,
    pub deleted: BTreeMap<usize, usize>,
}

impl PloStats {
    pub fn of(set: &PseudoLabelSet) -> PloStats {
        let mut s = PloStats::default();
        for (&c, o) in set.coarse.iter().zip(&set.optimized) {
            *if o.is_some() { &mut s.retained } else { &mut s.deleted }.entry(c).or_default() += 1;
        }
        s
    }
}

/// Debug record for one view of an unlabeled scene.
#[derive(Clone, Debug, Serialize)]
pub struct PloViewDump {
    pub scene_id: String,
    pub view_index: usize,
    pub t_conf: f64,
    pub points: PloStats,
    pub pixels: PloStats,
}
