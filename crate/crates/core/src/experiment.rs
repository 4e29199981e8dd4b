//! Standalone dual-polishing experiment: train both polishers on the
//! annotated scenes, then report pseudo-label quality on the unannotated
//! scenes before and after polishing the teacher-oracle detections.

use crate::config::ExperimentConfig;
use crate::geom::{iou, BBox};
use crate::metrics::{deviation_stats, pseudo_quality, DeviationStats, PseudoQualityReport};
use crate::net::OptimState;
use crate::polish::{train_box_step, train_category_step, BoxPolisher, CategoryPolisher};
use crate::rng::{stream, tags, SimRng};
use crate::sample::{retain_clean_negatives, sample_category_set, sample_regression_set};
use crate::scene::{
    map_for_scene, oracle_for_scene, proposals_for_scene, DatasetSplit, PseudoDetection, Scene,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("polishing diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("dataset has no annotated scenes")]
    NoAnnotatedScenes,
}

/// One logged polishing step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolishStepRecord {
    pub step: usize,
    pub l_pc: f64,
    pub l_pr: f64,
}

#[derive(Debug)]
pub struct TrainPolishOutcome {
    pub category_polisher: CategoryPolisher,
    pub box_polisher: BoxPolisher,
    /// Quality of the raw oracle detections on candidate objects.
    pub before: PseudoQualityReport,
    /// Quality after polishing boxes and categories.
    pub after: PseudoQualityReport,
    /// Deviation distribution of the raw oracle detections against the
    /// hidden ground truth (the "real" side of the simulated-vs-real
    /// comparison).
    pub oracle_deviation: Option<DeviationStats>,
    pub history: Vec<PolishStepRecord>,
}

fn matched_gt_box(scene: &Scene, det: &PseudoDetection) -> Option<BBox> {
    scene
        .objects
        .iter()
        .map(|o| (iou(det.bbox, o.bbox), o.bbox))
        .reduce(|a, b| if b.0 > a.0 { b } else { a })
        .map(|(_, bbox)| bbox)
}

/// Trains both polishers on Gaussian-synthesized pairs from the annotated
/// scenes and reports the before/after quality of polished oracle pseudo
/// labels on the unannotated scenes. Disabled polishers leave their part
/// of the labels untouched.
pub fn train_polish_experiment(
    split: &DatasetSplit,
    cfg: &ExperimentConfig,
    enable_category: bool,
    enable_box: bool,
    seed: u64,
) -> Result<TrainPolishOutcome, ExperimentError> {
    if split.annotated.is_empty() {
        return Err(ExperimentError::NoAnnotatedScenes);
    }
    let channels = cfg.features.channels;
    let num_classes = split.gen_config.num_classes;
    let mut category_polisher = CategoryPolisher::new(
        cfg.polisher.roi_resolution,
        channels,
        cfg.polisher.category_hidden,
        num_classes,
        &mut SimRng::with_stream(seed, stream(tags::CAT_POLISHER_INIT, 0)),
    );
    let mut box_polisher = BoxPolisher::new(
        cfg.polisher.roi_resolution,
        channels,
        cfg.polisher.box_hidden,
        cfg.polisher.context(),
        &mut SimRng::with_stream(seed, stream(tags::BOX_POLISHER_INIT, 0)),
    );
    let mut cat_opt = OptimState::new(
        &category_polisher.net,
        cfg.optim.learning_rate,
        cfg.optim.momentum,
        cfg.optim.weight_decay,
    );
    let mut box_opt = OptimState::new(
        &box_polisher.net,
        cfg.optim.learning_rate,
        cfg.optim.momentum,
        cfg.optim.weight_decay,
    );

    // Candidate oracle detections (teacher confidence above eta) on the
    // evaluated slice of unannotated scenes.
    let n_eval = if cfg.train_polish.eval_scenes == 0 {
        split.unannotated.len()
    } else {
        cfg.train_polish.eval_scenes.min(split.unannotated.len())
    };
    let eval_scenes = &split.unannotated[..n_eval];
    let mut candidates: Vec<(u64, PseudoDetection)> = Vec::new();
    for scene in eval_scenes {
        for det in oracle_for_scene(scene, num_classes, &split.oracle_config, seed) {
            if det.confidence > cfg.ssod.eta {
                candidates.push((scene.scene_id, det));
            }
        }
    }
    let before = pseudo_quality(&candidates, eval_scenes);
    let oracle_pairs: Vec<(BBox, BBox)> = {
        let mut pairs = Vec::with_capacity(candidates.len());
        let mut idx = 0usize;
        for scene in eval_scenes {
            while idx < candidates.len() && candidates[idx].0 == scene.scene_id {
                if let Some(gt) = matched_gt_box(scene, &candidates[idx].1) {
                    pairs.push((candidates[idx].1.bbox, gt));
                }
                idx += 1;
            }
        }
        pairs
    };
    let oracle_deviation = deviation_stats(&oracle_pairs).ok();

    // Training loop: one annotated scene and one of its objects per step.
    // The learning rate drops for the final fifth of the schedule so the
    // polishers settle instead of hovering around their solutions.
    let mut rng = SimRng::with_stream(seed, stream(tags::TRAIN_POLISH_PICK, 0));
    let mut history = Vec::new();
    let decay_after = cfg.train_polish.steps * 4 / 5;
    if enable_category || enable_box {
        for step in 0..cfg.train_polish.steps {
            let lr = if step >= decay_after {
                cfg.optim.learning_rate * 0.1
            } else {
                cfg.optim.learning_rate
            };
            cat_opt.learning_rate = lr;
            box_opt.learning_rate = lr;
            let scene = &split.annotated[rng.index(split.annotated.len())];
            let map = map_for_scene(scene, &cfg.features, seed);
            let object = &scene.objects[rng.index(scene.objects.len())];
            let mut l_pc = 0.0;
            let mut l_pr = 0.0;
            if enable_category {
                let proposals = proposals_for_scene(scene, &cfg.proposals, seed);
                let mut set = sample_category_set(object, &proposals, &cfg.polish_learn, &mut rng);
                retain_clean_negatives(&mut set, &scene.objects, &cfg.polish_learn);
                if !set.is_empty() {
                    let batch: Vec<_> = set.iter().map(|s| (s, &map)).collect();
                    l_pc = train_category_step(&mut category_polisher, &batch, &mut cat_opt)
                        .map_err(|e| ExperimentError::Diverged {
                            step,
                            detail: e.to_string(),
                        })?;
                }
            }
            if enable_box {
                let set = sample_regression_set(object, &cfg.polish_learn, &mut rng).map_err(
                    |e| ExperimentError::Diverged {
                        step,
                        detail: e.to_string(),
                    },
                )?;
                if !set.is_empty() {
                    let batch: Vec<_> = set.iter().map(|s| (s, &map)).collect();
                    l_pr =
                        train_box_step(&mut box_polisher, &batch, &mut box_opt, cfg.polisher.box_loss)
                            .map_err(|e| ExperimentError::Diverged {
                                step,
                                detail: e.to_string(),
                            })?;
                }
            }
            history.push(PolishStepRecord { step, l_pc, l_pr });
        }
    }

    // After-report: polish each candidate with whatever is enabled,
    // rendering each scene's map once.
    let mut polished: Vec<(u64, PseudoDetection)> = Vec::with_capacity(candidates.len());
    {
        let mut idx = 0usize;
        for scene in eval_scenes {
            let in_scene_start = idx;
            while idx < candidates.len() && candidates[idx].0 == scene.scene_id {
                idx += 1;
            }
            if idx == in_scene_start {
                continue;
            }
            let map = map_for_scene(scene, &cfg.features, seed);
            for (id, det) in &candidates[in_scene_start..idx] {
                let bbox = if enable_box {
                    box_polisher.polish(&map, det.bbox)
                } else {
                    det.bbox
                };
                let (category, confidence) = if enable_category {
                    let pred = category_polisher.polish(&map, det.bbox);
                    (
                        pred.category.unwrap_or(category_polisher.background_index()),
                        pred.confidence,
                    )
                } else {
                    (det.category, det.confidence)
                };
                polished.push((
                    *id,
                    PseudoDetection {
                        bbox,
                        category,
                        confidence,
                    },
                ));
            }
        }
    }
    let after = pseudo_quality(&polished, eval_scenes);

    Ok(TrainPolishOutcome {
        category_polisher,
        box_polisher,
        before,
        after,
        oracle_deviation,
        history,
    })
}
