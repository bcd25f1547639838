use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{add, mean, scale, sq_norm_last, sub, Tensor};

/// Mean squared L2 distance between paired probability rows (`N x C`
/// each).
pub fn consistency_loss(y3d: &Tensor, y2d: &Tensor) -> Result<Tensor> {
    if y3d.shape() != y2d.shape() || y3d.rank() != 2 {
        bail!(Argument, "consistency needs matching N x C inputs, got {:?} and {:?}", y3d.shape(), y2d.shape());
    }
    Ok(mean(&sq_norm_last(&sub(y3d, y2d)?)?))
}

/// [`consistency_loss`] over the pairs of a step, if any; without pairs the
/// loss is a constant 0.
pub fn paired_consistency(paired: Option<&(Tensor, Tensor)>) -> Result<Tensor> {
    match paired {
        Some((y3d, y2d)) => consistency_loss(y3d, y2d),
        None => {
            log::warn!("consistency loss over zero pairs; using 0");
            Ok(Tensor::scalar(0.0))
        }
    }
}

/// Scalar values of one step's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l3d_labeled: f64,
    pub l2d_labeled: f64,
    pub l3d_unlabeled: f64,
    pub l2d_unlabeled: f64,
    pub consistency: f64,
    pub lambda_c: f64,
    pub total: f64,
}

impl LossReport {
    /// `|total - (sum of terms + lambda_c * consistency)|`.
    pub fn identity_residual(&self) -> f64 {
        let expect = self.l3d_labeled + self.l2d_labeled + self.l3d_unlabeled + self.l2d_unlabeled + self.lambda_c * self.consistency;
        (self.total - expect).abs()
    }

    pub fn is_finite(&self) -> bool {
        [self.l3d_labeled, self.l2d_labeled, self.l3d_unlabeled, self.l2d_unlabeled, self.consistency, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// The differentiable loss terms of a step. Unlabeled terms are `None`
/// when no unlabeled scene takes part.
pub struct LossTerms {
    pub l3d_labeled: Tensor,
    pub l2d_labeled: Tensor,
    pub l3d_unlabeled: Option<Tensor>,
    pub l2d_unlabeled: Option<Tensor>,
    pub consistency: Tensor,
}

/// `L3D_l + L2D_l + L3D_u + L2D_u + lambda_c * Lc`.
pub fn total_loss(terms: &LossTerms, lambda_c: f64) -> Result<(Tensor, LossReport)> {
    if !(lambda_c >= 0.0) {
        bail!(Config, "lambda_c must be non-negative, got {lambda_c}");
    }
    let zero = Tensor::scalar(0.0);
    let l3u = terms.l3d_unlabeled.as_ref().unwrap_or(&zero);
    let l2u = terms.l2d_unlabeled.as_ref().unwrap_or(&zero);
    let mut total = add(&terms.l3d_labeled, &terms.l2d_labeled)?;
    total = add(&total, l3u)?;
    total = add(&total, l2u)?;
    if lambda_c > 0.0 {
        total = add(&total, &scale(&terms.consistency, lambda_c))?;
    }
    let report = LossReport {
        l3d_labeled: terms.l3d_labeled.item(),
        l2d_labeled: terms.l2d_labeled.item(),
        l3d_unlabeled: l3u.item(),
        l2d_unlabeled: l2u.item(),
        consistency: terms.consistency.item(),
        lambda_c,
        total: total.item(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::cross_entropy;

    #[test]
    fn consistency_examples() {
        let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(consistency_loss(&a, &b).unwrap().item(), 2.0);
        assert_eq!(consistency_loss(&a, &a).unwrap().item(), 0.0);
        let none = paired_consistency(None).unwrap();
        assert_eq!(none.item(), 0.0);
        assert!(!none.requires_grad());
    }

    #[test]
    fn consistency_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (n, c) = (rng.random_range(1..20), rng.random_range(2..7));
            let a: Vec<f64> = (0..n * c).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..n * c).map(|_| rng.random()).collect();
            let mut acc = 0.0;
            for i in 0..n {
                acc += (0..c).map(|k| (a[i * c + k] - b[i * c + k]).powi(2)).sum::<f64>();
            }
            let got = consistency_loss(&Tensor::new(&[n, c], a).unwrap(), &Tensor::new(&[n, c], b).unwrap()).unwrap();
            assert!((got.item() - acc / n as f64).abs() < 1e-12);
        }
    }

    fn terms(unlabeled: bool) -> LossTerms {
        LossTerms {
            l3d_labeled: Tensor::scalar(0.7),
            l2d_labeled: Tensor::scalar(1.1),
            l3d_unlabeled: unlabeled.then(|| Tensor::scalar(0.3)),
            l2d_unlabeled: unlabeled.then(|| Tensor::scalar(0.2)),
            consistency: Tensor::scalar(0.05),
        }
    }

    #[test]
    fn total_identity_and_phases() {
        let (_, r) = total_loss(&terms(false), 5.0).unwrap();
        assert_eq!((r.l3d_unlabeled, r.l2d_unlabeled), (0.0, 0.0));
        assert!(r.identity_residual() < 1e-9);
        let (_, r) = total_loss(&terms(true), 5.0).unwrap();
        assert!(r.identity_residual() < 1e-9);
        let (_, r) = total_loss(&terms(true), 0.0).unwrap();
        assert!((r.total - 2.3).abs() < 1e-12);
        assert!(matches!(total_loss(&terms(true), -1.0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn all_deleted_unlabeled_terms_are_zero() {
        let logits = Tensor::param(&[3, 4], vec![0.3; 12]).unwrap();
        let ce = cross_entropy(&logits, &[4, 4, 4], 4).unwrap();
        let t = LossTerms { l3d_unlabeled: Some(ce.clone()), l2d_unlabeled: Some(ce), ..terms(false) };
        let (_, r) = total_loss(&t, 5.0).unwrap();
        assert_eq!((r.l3d_unlabeled, r.l2d_unlabeled), (0.0, 0.0));
    }
}
