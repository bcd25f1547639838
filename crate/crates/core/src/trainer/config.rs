use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use crate::branches::BranchConfig;
use crate::error::{bail, Result};

/// Component switches. Each preset adds one component to the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Train on teacher pseudo labels of unlabeled scenes in phase 2.
    pub pseudo_labels: bool,
    /// Teacher is the EMA of the student (otherwise the student itself).
    pub ema: bool,
    /// Filter pseudo labels by cross-modal voting and add the consistency loss.
    pub plo_consistency: bool,
    /// Attention fusion between the branches.
    pub dmf: bool,
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation { pseudo_labels: false, ema: false, plo_consistency: false, dmf: false };
    pub const MODEL_A: Ablation = Ablation { pseudo_labels: true, ..Self::BASELINE };
    pub const MODEL_B: Ablation = Ablation { ema: true, ..Self::MODEL_A };
    pub const MODEL_C: Ablation = Ablation { plo_consistency: true, ..Self::MODEL_B };
    pub const FULL: Ablation = Ablation { dmf: true, ..Self::MODEL_C };

    /// The ladder in order, with display names.
    pub const LADDER: [(&'static str, Ablation); 5] = [
        ("Baseline", Self::BASELINE),
        ("Model A", Self::MODEL_A),
        ("Model B", Self::MODEL_B),
        ("Model C", Self::MODEL_C),
        ("Full", Self::FULL),
    ];
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

/// Training run settings. Unknown JSON keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Share of epochs trained on labeled scenes only.
    pub phase1_fraction: f64,
    /// Optimizer steps per epoch; `None` means one per labeled scene.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub lambda_c: f64,
    pub t_conf: f64,
    pub t_ema: f64,
    pub heads: usize,
    pub views_per_scene: usize,
    /// Densification window (odd) for projected labels and 3D votes.
    pub window: usize,
    pub voxel_size: f64,
    pub widths_3d: Vec<usize>,
    pub widths_2d: Vec<usize>,
    pub max_grid_extent: usize,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    /// Append per-view pseudo-label statistics to `plo_debug.jsonl`.
    pub plo_debug: bool,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 15,
            phase1_fraction: 2.0 / 3.0,
            steps_per_epoch: None,
            lr: 0.01,
            lambda_c: 5.0,
            t_conf: 0.9,
            t_ema: 0.999,
            heads: 4,
            views_per_scene: 3,
            window: 9,
            voxel_size: 0.05,
            widths_3d: vec![16, 32, 64],
            widths_2d: vec![16, 32, 64],
            max_grid_extent: 32,
            eval_every: 1,
            plo_debug: false,
            ablation: Ablation::FULL,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(crate::Error::Config(format!("{key}: {msg}")))
            }
        };
        check(self.epochs >= 1, "epochs", "must be at least 1")?;
        check((0.0..=1.0).contains(&self.phase1_fraction), "phase1_fraction", "must lie in [0, 1]")?;
        check(self.steps_per_epoch != Some(0), "steps_per_epoch", "must be positive")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(self.lambda_c >= 0.0 && self.lambda_c.is_finite(), "lambda_c", "must be non-negative")?;
        check((0.0..=1.0).contains(&self.t_conf), "t_conf", "must lie in [0, 1]")?;
        check(self.t_ema > 0.0 && self.t_ema < 1.0, "t_ema", "must lie in (0, 1)")?;
        check(self.heads >= 1, "heads", "must be at least 1")?;
        check(self.views_per_scene >= 1, "views_per_scene", "must be at least 1")?;
        check(self.window % 2 == 1, "window", "must be odd")?;
        check(self.voxel_size > 0.0 && self.voxel_size.is_finite(), "voxel_size", "must be positive")?;
        check(self.eval_every >= 1, "eval_every", "must be at least 1")?;
        for (key, w) in [("widths_3d", &self.widths_3d), ("widths_2d", &self.widths_2d)] {
            check(!w.is_empty() && w.iter().all(|&v| v > 0), key, "must be non-empty and positive")?;
            check(w.iter().all(|&v| v % self.heads == 0), key, "every width must be divisible by heads")?;
        }
        check(self.widths_3d.len() == self.widths_2d.len(), "widths_2d", "must have as many scales as widths_3d")?;
        check(self.max_grid_extent >= 1, "max_grid_extent", "must be positive")?;
        Ok(())
    }

    /// Epochs trained before unlabeled scenes join.
    pub fn phase1_epochs(&self) -> usize {
        (self.epochs as f64 * self.phase1_fraction).round() as usize
    }

    pub fn model(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            branches: BranchConfig {
                widths_3d: self.widths_3d.clone(),
                widths_2d: self.widths_2d.clone(),
                num_classes,
                voxel_size: self.voxel_size,
                max_grid_extent: self.max_grid_extent,
            },
            heads: self.heads,
            dmf: self.ablation.dmf,
        }
    }

    /// Consistency weight in effect (zero when the component is off).
    pub fn effective_lambda_c(&self) -> f64 {
        if self.ablation.plo_consistency {
            self.lambda_c
        } else {
            0.0
        }
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Checks an ablation preset name (case-insensitive, e.g. "model_b", "full").
pub fn ablation_by_name(name: &str) -> Result<Ablation> {
    let key = name.to_ascii_lowercase().replace([' ', '-'], "_");
    Ok(match key.as_str() {
        "baseline" => Ablation::BASELINE,
        "model_a" | "a" => Ablation::MODEL_A,
        "model_b" | "b" => Ablation::MODEL_B,
        "model_c" | "c" => Ablation::MODEL_C,
        "full" => Ablation::FULL,
        _ => bail!(Config, "unknown ablation preset {name:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_split_of_fifteen_epochs() {
        let cfg = RunConfig { epochs: 15, ..Default::default() };
        // epochs are 1-based in logs: unlabeled data first used in epoch 11
        assert_eq!(cfg.phase1_epochs() + 1, 11);
        assert_eq!(RunConfig { epochs: 150, ..Default::default() }.phase1_epochs(), 100);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let e = RunConfig::from_json(r#"{"epochs": 3, "learning_rate": 0.1}"#).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = RunConfig::from_json(r#"{"t_ema": 1.5}"#).unwrap_err();
        assert!(e.to_string().contains("t_ema"), "{e}");
        let e = RunConfig::from_json(r#"{"heads": 3}"#).unwrap_err();
        assert!(e.to_string().contains("widths_3d"), "{e}");
        assert!(RunConfig::from_json("{}").is_ok());
    }

    #[test]
    fn ladder_adds_one_component_at_a_time() {
        let count = |a: Ablation| [a.pseudo_labels, a.ema, a.plo_consistency, a.dmf].iter().filter(|&&b| b).count();
        for (k, (_, a)) in Ablation::LADDER.iter().enumerate() {
            assert_eq!(count(*a), k);
        }
        assert_eq!(ablation_by_name("Model-B").unwrap(), Ablation::MODEL_B);
    }
}
