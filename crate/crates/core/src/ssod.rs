//! Toy end-to-end teacher-student loop: student detection heads over
//! fixed proposals, an EMA teacher producing pseudo labels, disentangled
//! polished-label selection, and the joint supervised + pseudo-supervised
//! objective.
//!
//! Ground truth of unannotated scenes is sealed away from training: the
//! unlabeled branch sees only rendered feature maps, anchor proposals and
//! teacher detections. Evaluation hooks read the hidden ground truth but
//! feed no gradients.

use crate::config::ExperimentConfig;
use crate::geom::{clip, decode_delta, encode_delta, iou, nms, BBox, Delta, ScoredBox};
use crate::metrics::{average_precision, coco_thresholds, ApResult};
use crate::net::{
    ema_update, sgd_step, smooth_l1, softmax, softmax_cross_entropy, DenseNet, NetGrads, OptimState,
};
use crate::polish::{
    train_box_step, train_category_step, BoxPolisher, CategoryPolisher, PolishError,
};
use crate::rng::{stream, tags, SimRng};
use crate::sample::{retain_clean_negatives, sample_category_set, sample_regression_set};
use crate::scene::{
    anchor_proposals, map_for_scene, proposals_for_scene, roi_align, DatasetSplit, FeatureMap,
    PseudoDetection, Scene,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SsodError {
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
}

/// Proposal-to-target assignment threshold shared by the supervised and
/// pseudo-supervised paths.
pub const ASSIGN_IOU: f64 = 0.5;

/// Proposals whose best overlap falls between this and [`ASSIGN_IOU`] are
/// neither positives nor sampled as background: an almost-positive that
/// is pushed toward background would poison anchor scoring at inference
/// time, where no jittered proposals exist.
pub const BACKGROUND_IOU: f64 = 0.4;

/// Classification and class-agnostic regression heads reading the same
/// ROI resolution.
///
/// Head features are extracted over a context-padded window (the proposal
/// scaled by `window_scale` about its center): the synthetic feature maps
/// saturate inside objects, so a proposal-tight ROI cannot tell an
/// aligned box from a fragment nested inside the object.
#[derive(Debug, Clone)]
pub struct DetectorHeads {
    pub cls: DenseNet,
    pub reg: DenseNet,
    pub roi_resolution: usize,
    pub window_scale: f64,
    pub num_classes: usize,
}

impl DetectorHeads {
    pub fn new(
        roi_resolution: usize,
        window_scale: f64,
        channels: usize,
        hidden: usize,
        num_classes: usize,
        cls_rng: &mut SimRng,
        reg_rng: &mut SimRng,
    ) -> Self {
        let input = roi_resolution * roi_resolution * channels;
        let mut reg = DenseNet::init(&[input, hidden, 4], reg_rng);
        // The regression head starts near the identity decode.
        reg.scale_output_layer(0.01);
        Self {
            cls: DenseNet::init(&[input, hidden, num_classes + 1], cls_rng),
            reg,
            roi_resolution,
            window_scale,
            num_classes,
        }
    }

    /// ROI features of the padded window around a proposal.
    pub fn features(&self, map: &FeatureMap, proposal: BBox) -> Vec<f64> {
        roi_align(
            map,
            proposal.scaled_about_center(self.window_scale),
            self.roi_resolution,
        )
    }
}

/// Thresholds of the disentangled selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Teacher-confidence threshold for candidates.
    pub eta: f64,
    /// Polished-category confidence threshold for classification use.
    pub tau_cls: f64,
}

/// Pseudo supervision split by purpose: boxes paired with categories for
/// classification, plus boxes alone for regression.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoSupervision {
    pub cls_set: Vec<(BBox, usize)>,
    pub reg_set: Vec<BBox>,
}

/// Runs the detector heads over proposals: softmax over K+1 classes, the
/// best foreground probability is the score, boxes are decoded from the
/// class-agnostic delta and clipped, then greedy per-category NMS.
pub fn detect(
    heads: &DetectorHeads,
    map: &FeatureMap,
    proposals: &[BBox],
    score_thresh: f64,
    nms_thresh: f64,
) -> Vec<PseudoDetection> {
    let mut candidates = Vec::new();
    for &proposal in proposals {
        let feats = heads.features(map, proposal);
        let probs = softmax(&heads.cls.infer(&feats));
        let mut best = 0usize;
        for k in 1..heads.num_classes {
            if probs[k] > probs[best] {
                best = k;
            }
        }
        let score = probs[best];
        if score < score_thresh {
            continue;
        }
        let out = heads.reg.infer(&feats);
        let decoded = decode_delta(proposal, Delta::from_array([out[0], out[1], out[2], out[3]]));
        let bbox = clip(decoded.bbox, map.width() as f64, map.height() as f64).bbox;
        candidates.push(ScoredBox {
            bbox,
            score,
            category: best,
        });
    }
    nms(&candidates, nms_thresh)
        .into_iter()
        .map(|d| PseudoDetection {
            bbox: d.bbox,
            category: d.category,
            confidence: d.score,
        })
        .collect()
}

/// Disentangled selection: every candidate's polished box feeds
/// regression; only candidates whose polished category is a confident
/// foreground class feed classification (paired with the polished box).
pub fn select_disentangled(
    dets: &[PseudoDetection],
    category_polisher: &CategoryPolisher,
    box_polisher: &BoxPolisher,
    map: &FeatureMap,
    sel: &SelectionConfig,
) -> PseudoSupervision {
    select_supervision(
        dets,
        Some(category_polisher),
        Some(box_polisher),
        map,
        sel,
        true,
    )
}

/// Variant-aware selection: either polisher may be disabled (falling back
/// to the raw teacher output) and `disentangle = false` couples the two
/// uses, keeping only objects that pass the category gate.
pub fn select_supervision(
    dets: &[PseudoDetection],
    category_polisher: Option<&CategoryPolisher>,
    box_polisher: Option<&BoxPolisher>,
    map: &FeatureMap,
    sel: &SelectionConfig,
    disentangle: bool,
) -> PseudoSupervision {
    let mut sup = PseudoSupervision::default();
    for det in dets.iter().filter(|d| d.confidence > sel.eta) {
        let bbox = match box_polisher {
            Some(p) => p.polish(map, det.bbox),
            None => det.bbox,
        };
        let (category, confidence) = match category_polisher {
            Some(p) => {
                let pred = p.polish(map, det.bbox);
                (pred.category, pred.confidence)
            }
            None => (Some(det.category), det.confidence),
        };
        let confident = matches!(category, Some(_)) && confidence > sel.tau_cls;
        if disentangle {
            sup.reg_set.push(bbox);
            if confident {
                sup.cls_set.push((bbox, category.unwrap()));
            }
        } else if confident {
            sup.reg_set.push(bbox);
            sup.cls_set.push((bbox, category.unwrap()));
        }
    }
    sup
}

/// Mean losses and gradients of one head pass over a scene.
#[derive(Debug)]
pub struct HeadLosses {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub cls_grads: NetGrads,
    pub reg_grads: NetGrads,
    pub n_cls_samples: usize,
    pub n_reg_positives: usize,
}

impl HeadLosses {
    pub fn total(&self) -> f64 {
        self.cls_loss + self.reg_loss
    }
}

/// ROI sampling policy: minibatch size per scene with positives capped at
/// a quarter of it, remainder filled with background, both ranked by
/// assignment IoU (descending) for determinism.
#[derive(Debug, Clone, Copy)]
pub struct RoiSampling {
    pub batch: usize,
    pub smooth_l1_beta: f64,
}

fn best_match(proposal: BBox, targets: &[BBox]) -> (usize, f64) {
    let mut best = (0usize, -1.0f64);
    for (k, t) in targets.iter().enumerate() {
        let q = iou(proposal, *t);
        if q > best.1 {
            best = (k, q);
        }
    }
    best
}

/// Shared classification + regression objective over proposals.
///
/// Classification: proposals are assigned to the max-IoU `cls_targets`
/// entry (>= ASSIGN_IOU) or background, sampled into the ROI minibatch,
/// and scored with softmax cross-entropy. Regression: proposals assigned
/// to `reg_targets` entries regress the encoded delta under smooth L1.
/// Empty target lists contribute zero loss and zero gradients.
pub fn head_losses(
    heads: &DetectorHeads,
    map: &FeatureMap,
    proposals: &[BBox],
    cls_targets: &[(BBox, usize)],
    reg_targets: &[BBox],
    sampling: RoiSampling,
) -> HeadLosses {
    let mut out = HeadLosses {
        cls_loss: 0.0,
        reg_loss: 0.0,
        cls_grads: NetGrads::zeros_like(&heads.cls),
        reg_grads: NetGrads::zeros_like(&heads.reg),
        n_cls_samples: 0,
        n_reg_positives: 0,
    };
    let pos_cap = (sampling.batch / 4).max(1);

    if !cls_targets.is_empty() {
        let boxes: Vec<BBox> = cls_targets.iter().map(|(b, _)| *b).collect();
        let mut positives: Vec<(usize, usize, f64)> = Vec::new(); // (proposal, target, iou)
        let mut backgrounds: Vec<(usize, f64)> = Vec::new();
        for (p_idx, &proposal) in proposals.iter().enumerate() {
            let (t_idx, q) = best_match(proposal, &boxes);
            if q >= ASSIGN_IOU {
                positives.push((p_idx, t_idx, q));
            } else if q < BACKGROUND_IOU {
                backgrounds.push((p_idx, q));
            }
        }
        positives.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        backgrounds.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        positives.truncate(pos_cap);
        // Deterministic spread over the IoU-ranked background pool mixes
        // hard and easy negatives.
        let n_bg = (sampling.batch - positives.len().min(sampling.batch)).min(backgrounds.len());
        if n_bg > 0 {
            let step = backgrounds.len() as f64 / n_bg as f64;
            let picked: Vec<(usize, f64)> = (0..n_bg)
                .map(|k| backgrounds[(k as f64 * step) as usize])
                .collect();
            backgrounds = picked;
        } else {
            backgrounds.clear();
        }

        let background_class = heads.num_classes;
        let mut batch: Vec<(usize, usize)> = positives
            .iter()
            .map(|&(p, t, _)| (p, cls_targets[t].1))
            .collect();
        batch.extend(backgrounds.iter().map(|&(p, _)| (p, background_class)));
        if !batch.is_empty() {
            for &(p_idx, target) in &batch {
                let feats = heads.features(map, proposals[p_idx]);
                let (logits, cache) = heads.cls.forward(&feats);
                let (loss, dlogits) = softmax_cross_entropy(&logits, target);
                out.cls_loss += loss;
                let (grads, _) = heads.cls.backward(&cache, &dlogits);
                out.cls_grads.add_scaled(&grads, 1.0);
            }
            let inv = 1.0 / batch.len() as f64;
            out.cls_loss *= inv;
            out.cls_grads.scale(inv);
            out.n_cls_samples = batch.len();
        }
    }

    if !reg_targets.is_empty() {
        let mut positives: Vec<(usize, usize, f64)> = Vec::new();
        for (p_idx, &proposal) in proposals.iter().enumerate() {
            let (t_idx, q) = best_match(proposal, reg_targets);
            if q >= ASSIGN_IOU {
                positives.push((p_idx, t_idx, q));
            }
        }
        positives.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        positives.truncate(pos_cap);
        if !positives.is_empty() {
            for &(p_idx, t_idx, _) in &positives {
                let proposal = proposals[p_idx];
                let feats = heads.features(map, proposal);
                let (pred, cache) = heads.reg.forward(&feats);
                let target = encode_delta(proposal, reg_targets[t_idx]).as_array();
                let (loss, dpred) = smooth_l1(&pred, &target, sampling.smooth_l1_beta);
                out.reg_loss += loss;
                let (grads, _) = heads.reg.backward(&cache, &dpred);
                out.reg_grads.add_scaled(&grads, 1.0);
            }
            let inv = 1.0 / positives.len() as f64;
            out.reg_loss *= inv;
            out.reg_grads.scale(inv);
            out.n_reg_positives = positives.len();
        }
    }
    out
}

/// Supervised objective on an annotated scene: ground truth boxes serve
/// as both classification and regression targets.
pub fn supervised_loss(
    heads: &DetectorHeads,
    scene: &Scene,
    map: &FeatureMap,
    proposals: &[BBox],
    sampling: RoiSampling,
) -> HeadLosses {
    let cls_targets: Vec<(BBox, usize)> =
        scene.objects.iter().map(|o| (o.bbox, o.category)).collect();
    let reg_targets: Vec<BBox> = scene.objects.iter().map(|o| o.bbox).collect();
    head_losses(heads, map, proposals, &cls_targets, &reg_targets, sampling)
}

/// Pseudo-supervised objective: the disentangled sets drive the two
/// heads independently.
pub fn unsupervised_loss(
    heads: &DetectorHeads,
    map: &FeatureMap,
    proposals: &[BBox],
    supervision: &PseudoSupervision,
    sampling: RoiSampling,
) -> HeadLosses {
    head_losses(
        heads,
        map,
        proposals,
        &supervision.cls_set,
        &supervision.reg_set,
        sampling,
    )
}

/// Ablation switches of the full method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsodVariant {
    pub category_polish: bool,
    pub box_polish: bool,
    pub disentangle: bool,
}

impl Default for SsodVariant {
    fn default() -> Self {
        Self {
            category_polish: true,
            box_polish: true,
            disentangle: true,
        }
    }
}

impl SsodVariant {
    pub fn baseline() -> Self {
        Self {
            category_polish: false,
            box_polish: false,
            disentangle: true,
        }
    }
}

/// One line of the metrics history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub l_s: f64,
    pub l_u_cls: f64,
    pub l_u_reg: f64,
    pub l_pc: f64,
    pub l_pr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_ap50: Option<f64>,
}

#[derive(Debug)]
pub struct SsodOutcome {
    pub student: DetectorHeads,
    pub teacher: DetectorHeads,
    pub category_polisher: CategoryPolisher,
    pub box_polisher: BoxPolisher,
    pub history: Vec<IterationRecord>,
    pub final_ap: Option<ApResult>,
}

/// AP of a detector over the first `n_eval` scenes of a list, using
/// anchor proposals and the hidden ground truth (evaluation only).
pub fn evaluate_detector(
    heads: &DetectorHeads,
    scenes: &[Scene],
    n_eval: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> ApResult {
    let n = n_eval.min(scenes.len());
    let mut dets: Vec<(u64, ScoredBox)> = Vec::new();
    for scene in &scenes[..n] {
        let map = map_for_scene(scene, &cfg.features, seed);
        let proposals = anchor_proposals(scene.width, scene.height, &cfg.proposals);
        for d in detect(
            heads,
            &map,
            &proposals,
            cfg.ssod.eval_score_thresh,
            cfg.ssod.nms_thresh,
        ) {
            dets.push((
                scene.scene_id,
                ScoredBox {
                    bbox: d.bbox,
                    score: d.confidence,
                    category: d.category,
                },
            ));
        }
    }
    average_precision(&dets, &scenes[..n], &coco_thresholds())
}

/// The end-to-end loop. Per iteration: one annotated scene feeds the
/// supervised loss and dual polishing learning; the EMA teacher detects
/// on one unannotated scene, the selection builds pseudo supervision, and
/// the student takes a single step on `L_s + lambda_u * L_u`; finally the
/// teacher is EMA-updated.
///
/// Randomness is split across purpose streams (scene picks, polishing
/// batches, per-scene rendering), so disabling a branch leaves the other
/// branches' draws untouched.
pub fn run_ssod(
    split: &DatasetSplit,
    cfg: &ExperimentConfig,
    variant: &SsodVariant,
    seed: u64,
) -> Result<SsodOutcome, SsodError> {
    let channels = cfg.features.channels;
    let num_classes = split.gen_config.num_classes;
    let mut student = DetectorHeads::new(
        cfg.ssod.head_roi,
        cfg.ssod.head_window,
        channels,
        cfg.ssod.head_hidden,
        num_classes,
        &mut SimRng::with_stream(seed, stream(tags::HEAD_CLS_INIT, 0)),
        &mut SimRng::with_stream(seed, stream(tags::HEAD_REG_INIT, 0)),
    );
    let mut teacher = student.clone();
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

    let optim = &cfg.optim;
    let mut cls_opt = OptimState::new(&student.cls, optim.learning_rate, optim.momentum, optim.weight_decay);
    let mut reg_opt = OptimState::new(&student.reg, optim.learning_rate, optim.momentum, optim.weight_decay);
    let mut cat_opt = OptimState::new(
        &category_polisher.net,
        optim.learning_rate,
        optim.momentum,
        optim.weight_decay,
    );
    let mut box_opt = OptimState::new(
        &box_polisher.net,
        optim.learning_rate,
        optim.momentum,
        optim.weight_decay,
    );

    let mut pick_rng = SimRng::with_stream(seed, stream(tags::SSOD_PICK, 0));
    let mut polish_rng = SimRng::with_stream(seed, stream(tags::SSOD_POLISH, 0));

    let sampling = RoiSampling {
        batch: cfg.ssod.roi_batch,
        smooth_l1_beta: cfg.ssod.smooth_l1_beta,
    };
    let selection = SelectionConfig {
        eta: cfg.ssod.eta,
        tau_cls: cfg.ssod.tau_cls,
    };
    let eval_enabled = cfg.ssod.eval_scenes > 0 && !split.unannotated.is_empty();

    let mut history = Vec::with_capacity(cfg.ssod.iterations);
    for iteration in 0..cfg.ssod.iterations {
        // Scene picks always consume exactly two draws per iteration.
        let a_idx = pick_rng.index(split.annotated.len().max(1));
        let u_idx = pick_rng.index(split.unannotated.len().max(1));

        let annotated = &split.annotated[a_idx.min(split.annotated.len() - 1)];
        let a_map = map_for_scene(annotated, &cfg.features, seed);
        let a_proposals = proposals_for_scene(annotated, &cfg.proposals, seed);

        let sup = supervised_loss(&student, annotated, &a_map, &a_proposals, sampling);

        let unsup_active =
            cfg.ssod.lambda_u > 0.0 && iteration >= cfg.ssod.burn_in && !split.unannotated.is_empty();
        let unsup = if unsup_active {
            let unlabeled = &split.unannotated[u_idx];
            // Image formation for the unlabeled branch: the rendered map
            // and label-free anchor proposals are all training may see.
            let u_map = map_for_scene(unlabeled, &cfg.features, seed);
            let u_proposals = anchor_proposals(unlabeled.width, unlabeled.height, &cfg.proposals);
            let dets = detect(
                &teacher,
                &u_map,
                &u_proposals,
                cfg.ssod.score_thresh,
                cfg.ssod.nms_thresh,
            );
            let supervision = select_supervision(
                &dets,
                variant.category_polish.then_some(&category_polisher),
                variant.box_polish.then_some(&box_polisher),
                &u_map,
                &selection,
                variant.disentangle,
            );
            Some(unsupervised_loss(
                &student,
                &u_map,
                &u_proposals,
                &supervision,
                sampling,
            ))
        } else {
            None
        };

        let (l_u_cls, l_u_reg) = unsup
            .as_ref()
            .map(|u| (u.cls_loss, u.reg_loss))
            .unwrap_or((0.0, 0.0));
        let l_s = sup.total();
        let total = l_s + cfg.ssod.lambda_u * (l_u_cls + l_u_reg);
        if !total.is_finite() {
            return Err(SsodError::Diverged {
                iteration,
                detail: format!("student loss {total}"),
            });
        }

        let mut cls_grads = sup.cls_grads;
        let mut reg_grads = sup.reg_grads;
        if let Some(u) = &unsup {
            cls_grads.add_scaled(&u.cls_grads, cfg.ssod.lambda_u);
            reg_grads.add_scaled(&u.reg_grads, cfg.ssod.lambda_u);
        }
        let diverged = |e: crate::net::NetError| SsodError::Diverged {
            iteration,
            detail: e.to_string(),
        };
        sgd_step(&mut student.cls, &cls_grads, &mut cls_opt).map_err(diverged)?;
        sgd_step(&mut student.reg, &reg_grads, &mut reg_opt).map_err(diverged)?;

        // Dual polishing learning on the annotated scene, with the
        // learning rate dropped for the final fifth of the run.
        let mut l_pc = 0.0;
        let mut l_pr = 0.0;
        if variant.category_polish || variant.box_polish {
            let polish_lr = if iteration >= cfg.ssod.iterations * 4 / 5 {
                cfg.optim.learning_rate * 0.1
            } else {
                cfg.optim.learning_rate
            };
            cat_opt.learning_rate = polish_lr;
            box_opt.learning_rate = polish_lr;
            let object = &annotated.objects[polish_rng.index(annotated.objects.len())];
            let polish_failed = |e: PolishError| SsodError::Diverged {
                iteration,
                detail: e.to_string(),
            };
            if variant.category_polish {
                let mut set =
                    sample_category_set(object, &a_proposals, &cfg.polish_learn, &mut polish_rng);
                retain_clean_negatives(&mut set, &annotated.objects, &cfg.polish_learn);
                if !set.is_empty() {
                    let batch: Vec<_> = set.iter().map(|s| (s, &a_map)).collect();
                    l_pc = train_category_step(&mut category_polisher, &batch, &mut cat_opt)
                        .map_err(polish_failed)?;
                }
            }
            if variant.box_polish {
                let set = sample_regression_set(object, &cfg.polish_learn, &mut polish_rng)
                    .map_err(|e| SsodError::Diverged {
                        iteration,
                        detail: e.to_string(),
                    })?;
                if !set.is_empty() {
                    let batch: Vec<_> = set.iter().map(|s| (s, &a_map)).collect();
                    l_pr = train_box_step(
                        &mut box_polisher,
                        &batch,
                        &mut box_opt,
                        cfg.polisher.box_loss,
                    )
                    .map_err(polish_failed)?;
                }
            }
        }

        ema_update(&mut teacher.cls, &student.cls, cfg.ssod.ema_momentum);
        ema_update(&mut teacher.reg, &student.reg, cfg.ssod.ema_momentum);

        let eval_ap50 = if eval_enabled
            && cfg.ssod.eval_interval > 0
            && (iteration + 1) % cfg.ssod.eval_interval == 0
        {
            Some(
                evaluate_detector(&teacher, &split.unannotated, cfg.ssod.eval_scenes, cfg, seed)
                    .ap50,
            )
        } else {
            None
        };

        history.push(IterationRecord {
            iteration,
            l_s,
            l_u_cls,
            l_u_reg,
            l_pc,
            l_pr,
            eval_ap50,
        });
    }

    let final_ap = eval_enabled.then(|| {
        evaluate_detector(&teacher, &split.unannotated, cfg.ssod.eval_scenes, cfg, seed)
    });

    Ok(SsodOutcome {
        student,
        teacher,
        category_polisher,
        box_polisher,
        history,
        final_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::net::Layer;
    use crate::polish::ContextConfig;
    use crate::scene::{
        generate_scene, make_split, render_features, FeatureConfig, GroundTruthObject,
        SceneGenConfig, TeacherOracleConfig,
    };

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn zero_net(sizes: &[usize]) -> DenseNet {
        let layers: Vec<Layer> = sizes
            .windows(2)
            .map(|w| Layer {
                in_dim: w[0],
                out_dim: w[1],
                weight: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
            })
            .collect();
        DenseNet::from_layers(layers)
    }

    fn zero_heads(num_classes: usize, channels: usize) -> DetectorHeads {
        let input = 16 * channels;
        DetectorHeads {
            cls: zero_net(&[input, 8, num_classes + 1]),
            reg: zero_net(&[input, 8, 4]),
            roi_resolution: 4,
            window_scale: 2.5,
            num_classes,
        }
    }

    fn small_scene() -> (Scene, FeatureMap, FeatureConfig) {
        let fc = FeatureConfig {
            noise_std: 0.0,
            ..Default::default()
        };
        let scene = Scene {
            width: 32.0,
            height: 32.0,
            scene_id: 0,
            objects: vec![GroundTruthObject {
                category: 1,
                bbox: bb(8.0, 8.0, 22.0, 20.0),
            }],
        };
        let map = render_features(&scene, &fc, &mut SimRng::new(0));
        (scene, map, fc)
    }

    #[test]
    fn detect_zero_weights_is_empty_at_default_threshold() {
        let (_, map, fc) = small_scene();
        let heads = zero_heads(8, fc.channels);
        // Uniform softmax over 9 classes: score 1/9 < 0.3.
        let proposals = vec![bb(8.0, 8.0, 22.0, 20.0), bb(0.0, 0.0, 10.0, 10.0)];
        let dets = detect(&heads, &map, &proposals, 0.3, 0.5);
        assert!(dets.is_empty());
        // Threshold 0 keeps at most one per NMS cluster.
        let dets = detect(&heads, &map, &proposals, 0.0, 0.5);
        assert!(dets.len() <= proposals.len());
    }

    #[test]
    fn select_thresholds() {
        let (_, map, fc) = small_scene();
        let cat = CategoryPolisher::new(4, fc.channels, 8, 8, &mut SimRng::new(1));
        let boxp = BoxPolisher::new(
            4,
            fc.channels,
            [8, 8, 8],
            ContextConfig::default(),
            &mut SimRng::new(2),
        );
        let dets = vec![
            PseudoDetection {
                bbox: bb(8.0, 8.0, 20.0, 18.0),
                category: 1,
                confidence: 0.6,
            },
            PseudoDetection {
                bbox: bb(2.0, 2.0, 10.0, 10.0),
                category: 0,
                confidence: 0.4,
            },
        ];
        let sup = select_disentangled(
            &dets,
            &cat,
            &boxp,
            &map,
            &SelectionConfig {
                eta: 0.5,
                tau_cls: 0.0,
            },
        );
        assert_eq!(sup.reg_set.len(), 1);

        // tau_cls = 1.0: probabilities are strictly below 1, so cls_set
        // is empty while reg_set keeps all candidates.
        let sup = select_disentangled(
            &dets,
            &cat,
            &boxp,
            &map,
            &SelectionConfig {
                eta: 0.5,
                tau_cls: 1.0,
            },
        );
        assert!(sup.cls_set.is_empty());
        assert_eq!(sup.reg_set.len(), 1);
    }

    #[test]
    fn disentanglement_properties_over_seeded_batches() {
        let fc = FeatureConfig::default();
        let gen = SceneGenConfig::default();
        let cat = CategoryPolisher::new(4, fc.channels, 16, gen.num_classes, &mut SimRng::new(3));
        let boxp = BoxPolisher::new(
            4,
            fc.channels,
            [16, 16, 8],
            ContextConfig::default(),
            &mut SimRng::new(4),
        );
        let mut rng = SimRng::new(5);
        for batch in 0..1000u64 {
            let scene = generate_scene(&gen, batch, &mut SimRng::with_stream(6, batch));
            let map = map_for_scene(&scene, &fc, 6);
            let dets: Vec<PseudoDetection> = (0..1 + rng.index(5))
                .map(|_| {
                    let x1 = rng.uniform_in(0.0, gen.width - 9.0);
                    let y1 = rng.uniform_in(0.0, gen.height - 9.0);
                    PseudoDetection {
                        bbox: bb(
                            x1,
                            y1,
                            x1 + rng.uniform_in(4.0, 9.0),
                            y1 + rng.uniform_in(4.0, 9.0),
                        ),
                        category: rng.index(gen.num_classes),
                        confidence: rng.uniform(),
                    }
                })
                .collect();
            let eta = 0.5;
            let taus = [0.5, 0.7, 0.9, 0.99];
            let mut previous_len = usize::MAX;
            let mut reg_len = None;
            for tau in taus {
                let sup = select_disentangled(
                    &dets,
                    &cat,
                    &boxp,
                    &map,
                    &SelectionConfig { eta, tau_cls: tau },
                );
                assert!(sup.reg_set.len() >= sup.cls_set.len());
                // Raising tau never enlarges cls_set; reg_set is untouched.
                assert!(sup.cls_set.len() <= previous_len);
                previous_len = sup.cls_set.len();
                match reg_len {
                    None => reg_len = Some(sup.reg_set.len()),
                    Some(n) => assert_eq!(n, sup.reg_set.len()),
                }
            }
        }
    }

    #[test]
    fn supervised_no_positive_boundary() {
        let (scene, map, fc) = small_scene();
        let heads = zero_heads(8, fc.channels);
        // One far-away proposal: all-background classification, zero
        // regression term.
        let proposals = vec![bb(0.0, 0.0, 4.0, 4.0)];
        let losses = supervised_loss(
            &heads,
            &scene,
            &map,
            &proposals,
            RoiSampling {
                batch: 32,
                smooth_l1_beta: 1.0,
            },
        );
        assert_eq!(losses.n_reg_positives, 0);
        assert_eq!(losses.reg_loss, 0.0);
        assert_eq!(losses.n_cls_samples, 1);
        assert!((losses.cls_loss - (9.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_proposals_do_not_change_loss() {
        let (scene, map, fc) = small_scene();
        let heads = zero_heads(8, fc.channels);
        let sampling = RoiSampling {
            batch: 32,
            smooth_l1_beta: 1.0,
        };
        let proposals = vec![bb(8.0, 8.0, 21.0, 19.0), bb(1.0, 1.0, 7.0, 7.0)];
        let doubled: Vec<BBox> = proposals.iter().chain(&proposals).copied().collect();
        let a = supervised_loss(&heads, &scene, &map, &proposals, sampling);
        let b = supervised_loss(&heads, &scene, &map, &doubled, sampling);
        assert!((a.cls_loss - b.cls_loss).abs() < 1e-12);
        assert!((a.reg_loss - b.reg_loss).abs() < 1e-12);
    }

    #[test]
    fn unsupervised_equals_supervised_on_gt_supervision() {
        let (scene, map, fc) = small_scene();
        // Non-trivial heads so the comparison is meaningful.
        let heads = DetectorHeads::new(
            4,
            fc.channels,
            16,
            8,
            &mut SimRng::new(31),
            &mut SimRng::new(32),
        );
        let sampling = RoiSampling {
            batch: 32,
            smooth_l1_beta: 1.0,
        };
        let proposals = vec![
            bb(8.0, 8.0, 21.0, 19.0),
            bb(9.0, 7.0, 23.0, 21.0),
            bb(1.0, 1.0, 7.0, 7.0),
            bb(20.0, 2.0, 30.0, 12.0),
        ];
        let sup = supervised_loss(&heads, &scene, &map, &proposals, sampling);
        let supervision = PseudoSupervision {
            cls_set: scene.objects.iter().map(|o| (o.bbox, o.category)).collect(),
            reg_set: scene.objects.iter().map(|o| o.bbox).collect(),
        };
        let unsup = unsupervised_loss(&heads, &map, &proposals, &supervision, sampling);
        assert!((sup.cls_loss - unsup.cls_loss).abs() < 1e-9);
        assert!((sup.reg_loss - unsup.reg_loss).abs() < 1e-9);

        // Disentanglement in action: empty cls_set silences only the
        // classification term.
        let reg_only = PseudoSupervision {
            cls_set: vec![],
            reg_set: supervision.reg_set.clone(),
        };
        let u = unsupervised_loss(&heads, &map, &proposals, &reg_only, sampling);
        assert_eq!(u.cls_loss, 0.0);
        assert!(u.reg_loss > 0.0);
        let empty = unsupervised_loss(&heads, &map, &proposals, &PseudoSupervision::default(), sampling);
        assert_eq!(empty.total(), 0.0);
    }

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.scene = SceneGenConfig {
            width: 32.0,
            height: 32.0,
            num_classes: 4,
            max_objects: 2,
            min_object_size: 8.0,
            max_object_size: 16.0,
            overlap_cap: 0.3,
        };
        cfg.features.channels = 4;
        cfg.proposals.n_jitter = 4;
        cfg.polisher.category_hidden = 16;
        cfg.polisher.box_hidden = [16, 16, 8];
        cfg.polish_learn.n_cls_c = 8;
        cfg.polish_learn.n_cls_m = 8;
        cfg.polish_learn.n_reg = 8;
        cfg.ssod.iterations = 12;
        cfg.ssod.burn_in = 4;
        cfg.ssod.head_hidden = 16;
        cfg.ssod.eval_interval = 0;
        cfg.ssod.eval_scenes = 0;
        cfg
    }

    fn tiny_split(cfg: &ExperimentConfig, n_a: usize, n_u: usize, seed: u64) -> DatasetSplit {
        make_split(n_a, n_u, &cfg.scene, &TeacherOracleConfig::default(), seed)
    }

    #[test]
    fn run_ssod_is_deterministic() {
        let cfg = tiny_config();
        let split = tiny_split(&cfg, 4, 4, 9);
        let a = run_ssod(&split, &cfg, &SsodVariant::default(), 3).unwrap();
        let b = run_ssod(&split, &cfg, &SsodVariant::default(), 3).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(
            a.student.cls.to_json(),
            b.student.cls.to_json()
        );
        assert_eq!(a.teacher.reg.to_json(), b.teacher.reg.to_json());
    }

    #[test]
    fn supervised_trajectory_independent_of_unlabeled_data_when_disabled() {
        let mut cfg = tiny_config();
        cfg.ssod.lambda_u = 0.0;
        let variant = SsodVariant {
            category_polish: false,
            box_polish: false,
            disentangle: true,
        };
        let split_a = tiny_split(&cfg, 4, 4, 9);
        // Same annotated scenes, completely different unannotated pool.
        let mut split_b = tiny_split(&cfg, 4, 8, 9);
        split_b.unannotated = tiny_split(&cfg, 4, 8, 1234).unannotated;

        let a = run_ssod(&split_a, &cfg, &variant, 3).unwrap();
        let b = run_ssod(&split_b, &cfg, &variant, 3).unwrap();
        let ls_a: Vec<f64> = a.history.iter().map(|r| r.l_s).collect();
        let ls_b: Vec<f64> = b.history.iter().map(|r| r.l_s).collect();
        assert_eq!(ls_a, ls_b);
        assert_eq!(a.student.cls.to_json(), b.student.cls.to_json());
        assert_eq!(a.student.reg.to_json(), b.student.reg.to_json());
    }

    #[test]
    fn teacher_only_moves_by_ema() {
        // m = 1: the teacher must stay at its initial parameters.
        let mut cfg = tiny_config();
        cfg.ssod.ema_momentum = 1.0;
        let split = tiny_split(&cfg, 4, 4, 9);
        let out = run_ssod(&split, &cfg, &SsodVariant::default(), 3).unwrap();
        let init = DetectorHeads::new(
            cfg.ssod.head_roi,
            cfg.ssod.head_window,
            cfg.features.channels,
            cfg.ssod.head_hidden,
            cfg.scene.num_classes,
            &mut SimRng::with_stream(3, stream(tags::HEAD_CLS_INIT, 0)),
            &mut SimRng::with_stream(3, stream(tags::HEAD_REG_INIT, 0)),
        );
        assert_eq!(out.teacher.cls.to_json(), init.cls.to_json());
        assert_eq!(out.teacher.reg.to_json(), init.reg.to_json());
        assert_ne!(out.student.cls.to_json(), init.cls.to_json());

        // m = 0: the teacher tracks the student exactly.
        cfg.ssod.ema_momentum = 0.0;
        let out = run_ssod(&split, &cfg, &SsodVariant::default(), 3).unwrap();
        assert_eq!(out.teacher.cls.to_json(), out.student.cls.to_json());
        assert_eq!(out.teacher.reg.to_json(), out.student.reg.to_json());
    }
}
