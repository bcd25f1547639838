//! Confusion matrices and mIoU / mAcc / OA.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// `classes x classes` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per element whose ground truth is not `ignore`.
    pub fn accumulate(&mut self, gt: &[usize], pred: &[usize], ignore: usize) -> Result<()> {
        if gt.len() != pred.len() {
            bail!(Argument, "{} ground-truth labels but {} predictions", gt.len(), pred.len());
        }
        let c = self.classes;
        if let Some(i) = (0..gt.len()).find(|&i| gt[i] != ignore && (gt[i] >= c || pred[i] >= c)) {
            bail!(Argument, "element {i}: label pair ({}, {}) out of range for {c} classes", gt[i], pred[i]);
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g != ignore {
                self.counts[g * c + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            bail!(Argument, "cannot merge {}- and {}-class matrices", self.classes, other.classes);
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Scores of one confusion matrix. `per_class_iou` is `None` for classes
/// absent from both ground truth and prediction; those are excluded from
/// the means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "mAcc")]
    pub macc: f64,
    #[serde(rename = "OA")]
    pub oa: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        bail!(Evaluation, "no scored elements");
    }
    let c = cm.classes;
    let mut per_class_iou = vec![None; c];
    let (mut iou_sum, mut acc_sum, mut present, mut trace) = (0.0, 0.0, 0usize, 0u64);
    for k in 0..c {
        let tp = cm.get(k, k);
        let row: u64 = (0..c).map(|p| cm.get(k, p)).sum();
        let col: u64 = (0..c).map(|g| cm.get(g, k)).sum();
        trace += tp;
        if row + col == 0 {
            continue;
        }
        let iou = tp as f64 / (row + col - tp) as f64;
        per_class_iou[k] = Some(iou);
        iou_sum += iou;
        // a class predicted but never in the ground truth has recall 0
        acc_sum += if row > 0 { tp as f64 / row as f64 } else { 0.0 };
        present += 1;
    }
    Ok(Metrics {
        miou: iou_sum / present as f64,
        macc: acc_sum / present as f64,
        oa: trace as f64 / total as f64,
        per_class_iou,
    })
}

/// JSON record `{modality, mIoU, mAcc, OA, per_class_iou}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityMetrics {
    pub modality: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn worked_two_class_example() {
        let cm = ConfusionMatrix { classes: 2, counts: vec![1, 1, 0, 2] };
        let m = compute_metrics(&cm).unwrap();
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!((m.macc, m.oa), (0.75, 0.75));
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
    }

    #[test]
    fn accumulate_rules() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[3, 3], &[0, 1], 3).unwrap();
        assert_eq!(cm.total(), 0);
        cm.accumulate(&[2], &[2], 3).unwrap();
        assert_eq!(cm.get(2, 2), 1);
        assert!(matches!(cm.accumulate(&[4], &[0], 3), Err(crate::Error::Argument(_))));
        assert!(matches!(compute_metrics(&ConfusionMatrix::new(2)), Err(crate::Error::Evaluation(_))));
    }

    #[test]
    fn perfect_and_absent_classes() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&[0, 1, 1, 3], &[0, 1, 1, 3], 9).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!((m.miou, m.macc, m.oa), (1.0, 1.0, 1.0));
        assert_eq!(m.per_class_iou[2], None);

        let mut full = ConfusionMatrix::new(3);
        full.accumulate(&[0, 0, 2, 2, 2], &[0, 2, 2, 0, 2], 9).unwrap();
        let mut reduced = ConfusionMatrix::new(2);
        reduced.accumulate(&[0, 0, 1, 1, 1], &[0, 1, 1, 0, 1], 9).unwrap();
        let (a, b) = (compute_metrics(&full).unwrap(), compute_metrics(&reduced).unwrap());
        assert_eq!((a.miou, a.macc, a.oa), (b.miou, b.macc, b.oa));
    }

    #[test]
    fn chunked_accumulation_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt: Vec<usize> = (0..300).map(|_| rng.random_range(0..6)).collect();
        let pred: Vec<usize> = (0..300).map(|_| rng.random_range(0..5)).collect();
        let mut whole = ConfusionMatrix::new(5);
        whole.accumulate(&gt, &pred, 5).unwrap();
        let mut merged = ConfusionMatrix::new(5);
        for k in 0..3 {
            let mut part = ConfusionMatrix::new(5);
            part.accumulate(&gt[k * 100..(k + 1) * 100], &pred[k * 100..(k + 1) * 100], 5).unwrap();
            merged.merge(&part).unwrap();
        }
        assert_eq!(whole, merged);
    }

    #[test]
    fn json_shape() {
        let cm = ConfusionMatrix { classes: 2, counts: vec![1, 1, 0, 2] };
        let rec = ModalityMetrics { modality: "3d".into(), metrics: compute_metrics(&cm).unwrap() };
        let v = serde_json::to_value(&rec).unwrap();
        for key in ["modality", "mIoU", "mAcc", "OA", "per_class_iou"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
