use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};

/// Seeded labeled/unlabeled split: `max(1, round(ratio * n))` ids are
/// labeled. Both halves keep the input order.
pub fn split_dataset<T: Clone>(ids: &[T], labeled_ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        bail!(Config, "labeled_ratio must lie in (0, 1], got {labeled_ratio}");
    }
    if ids.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let n = ids.len();
    let k = ((labeled_ratio * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled_mask = vec![false; n];
    for &i in &order[..k] {
        labeled_mask[i] = true;
    }
    let labeled = (0..n).filter(|&i| labeled_mask[i]).map(|i| ids[i].clone()).collect();
    let unlabeled = (0..n).filter(|&i| !labeled_mask[i]).map(|i| ids[i].clone()).collect();
    Ok((labeled, unlabeled))
}
