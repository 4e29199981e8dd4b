//! Aggregated experiment configuration. Every section has defaults and
//! rejects unknown keys, so misspelled config files fail fast.

use crate::polish::{BoxLossKind, ContextConfig};
use crate::sample::PolishLearnConfig;
use crate::scene::{FeatureConfig, ProposalConfig, SceneGenConfig, TeacherOracleConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_annotated: usize,
    pub n_unannotated: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_annotated: 200,
            n_unannotated: 800,
        }
    }
}

/// Architecture of the two polishing networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolisherConfig {
    pub roi_resolution: usize,
    pub category_hidden: usize,
    pub box_hidden: [usize; 3],
    pub gamma: f64,
    pub box_loss: BoxLossKind,
}

impl Default for PolisherConfig {
    fn default() -> Self {
        Self {
            roi_resolution: 4,
            category_hidden: 128,
            box_hidden: [128, 128, 64],
            // The synthetic feature maps saturate inside objects, so the
            // context set must reach clearly beyond the box to see the
            // boundary; gamma far below this leaves every ROI tap inside
            // the input box and the box polisher blind.
            gamma: 0.3,
            box_loss: BoxLossKind::Giou,
        }
    }
}

impl PolisherConfig {
    pub fn context(&self) -> ContextConfig {
        ContextConfig { gamma: self.gamma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Standalone dual-polishing experiment budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPolishConfig {
    pub steps: usize,
    /// Cap on unannotated scenes used for the before/after reports;
    /// 0 means all of them.
    pub eval_scenes: usize,
}

impl Default for TrainPolishConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            eval_scenes: 0,
        }
    }
}

/// Teacher-student loop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsodConfig {
    pub iterations: usize,
    /// Weight of the pseudo-supervised loss.
    pub lambda_u: f64,
    pub ema_momentum: f64,
    /// Teacher-confidence threshold selecting candidate objects.
    pub eta: f64,
    /// Polished-category confidence threshold for classification use.
    pub tau_cls: f64,
    /// Teacher detection score threshold during training.
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub head_hidden: usize,
    /// ROI resolution of the detector heads.
    pub head_roi: usize,
    /// Context padding of the heads' ROI window (scale about the
    /// proposal center).
    pub head_window: f64,
    /// ROI minibatch per scene; positives capped at a quarter of it.
    pub roi_batch: usize,
    pub smooth_l1_beta: f64,
    /// Supervised-only warmup iterations before pseudo losses activate.
    pub burn_in: usize,
    /// Evaluate every this many iterations (0 disables evaluation).
    pub eval_interval: usize,
    /// Unannotated scenes used for evaluation (0 disables evaluation).
    pub eval_scenes: usize,
    /// Detection score threshold used when evaluating AP.
    pub eval_score_thresh: f64,
}

impl Default for SsodConfig {
    fn default() -> Self {
        Self {
            iterations: 700,
            lambda_u: 2.0,
            ema_momentum: 0.99,
            eta: 0.5,
            tau_cls: 0.9,
            score_thresh: 0.3,
            nms_thresh: 0.5,
            head_hidden: 64,
            head_roi: 6,
            head_window: 2.5,
            roi_batch: 32,
            smooth_l1_beta: 1.0,
            burn_in: 100,
            eval_interval: 0,
            eval_scenes: 100,
            eval_score_thresh: 0.05,
        }
    }
}

/// Everything an experiment needs besides the seed and file paths.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneGenConfig,
    pub features: FeatureConfig,
    pub proposals: ProposalConfig,
    pub oracle: TeacherOracleConfig,
    pub split: SplitConfig,
    pub polish_learn: PolishLearnConfig,
    pub polisher: PolisherConfig,
    pub optim: OptimConfig,
    pub train_polish: TrainPolishConfig,
    pub ssod: SsodConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_all_defaults() {
        let parsed: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"ssod": {"bogus": 1}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"scene": {"wdith": 64}}"#).is_err());
    }

    #[test]
    fn box_loss_kind_spelling() {
        let parsed: ExperimentConfig =
            serde_json::from_str(r#"{"polisher": {"box_loss": "l1"}}"#).unwrap();
        assert_eq!(parsed.polisher.box_loss, BoxLossKind::L1);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"polisher": {"box_loss": "dice"}}"#)
            .is_err());
    }
}
