//! Evaluation suite: pseudo-label quality reports, deviation statistics
//! split by box quality, and COCO-style average precision at toy scale.

use crate::geom::{iou, BBox, ScoredBox};
use crate::scene::{PseudoDetection, Scene};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("deviation_stats needs at least one pair")]
    EmptyInput,
}

/// Mean and (sample) standard deviation of one statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// IoU thresholds used by the correct-category counts of the quality
/// report.
pub const QUALITY_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Width-0.05 histogram of matched IoU plus correct-category counts at
/// fixed IoU thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoQualityReport {
    /// Histogram over [0, 1] with bin width 0.05; IoU 1.0 lands in the
    /// last bin. Unmatched detections count in the first bin.
    pub iou_bins: Vec<u64>,
    /// For each threshold in `QUALITY_THRESHOLDS`: detections with the
    /// correct category AND IoU strictly above the threshold.
    pub correct_at_thresh: Vec<u64>,
    pub total: u64,
    /// Mean matched IoU (matched detections only).
    pub mean_iou: f64,
    /// Fraction of matched detections with the correct category.
    pub category_accuracy: f64,
}

pub const QUALITY_BINS: usize = 20;

/// Matches every detection to the max-IoU ground-truth object of its
/// scene (ties broken by object index) and aggregates quality statistics.
pub fn pseudo_quality(dets: &[(u64, PseudoDetection)], scenes: &[Scene]) -> PseudoQualityReport {
    let by_id: BTreeMap<u64, &Scene> = scenes.iter().map(|s| (s.scene_id, s)).collect();
    let mut iou_bins = vec![0u64; QUALITY_BINS];
    let mut correct_at_thresh = vec![0u64; QUALITY_THRESHOLDS.len()];
    let mut matched = 0u64;
    let mut iou_sum = 0.0;
    let mut correct = 0u64;
    for (scene_id, det) in dets {
        let best = by_id.get(scene_id).and_then(|scene| {
            scene
                .objects
                .iter()
                .map(|o| (iou(det.bbox, o.bbox), o.category))
                .reduce(|a, b| if b.0 > a.0 { b } else { a })
        });
        match best {
            Some((q, category)) => {
                let bin = ((q / 0.05) as usize).min(QUALITY_BINS - 1);
                iou_bins[bin] += 1;
                matched += 1;
                iou_sum += q;
                let right = category == det.category;
                if right {
                    correct += 1;
                }
                for (k, thr) in QUALITY_THRESHOLDS.iter().enumerate() {
                    if right && q > *thr {
                        correct_at_thresh[k] += 1;
                    }
                }
            }
            None => iou_bins[0] += 1,
        }
    }
    PseudoQualityReport {
        iou_bins,
        correct_at_thresh,
        total: dets.len() as u64,
        mean_iou: if matched > 0 {
            iou_sum / matched as f64
        } else {
            0.0
        },
        category_accuracy: if matched > 0 {
            correct as f64 / matched as f64
        } else {
            0.0
        },
    }
}

/// Deviation statistics between pseudo and ground-truth boxes: IoU
/// mean/std split at 0.5 plus per-coordinate normalized position
/// deviation pooled over all pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    /// IoU stats of the pairs with IoU >= 0.5; absent when the group is
    /// empty.
    pub iou_high: Option<MeanStd>,
    /// IoU stats of the pairs with IoU < 0.5.
    pub iou_low: Option<MeanStd>,
    /// Normalized deviations for (x1, y1, x2, y2); x-coordinates divide
    /// by the ground-truth width, y-coordinates by its height.
    pub coords: [MeanStd; 4],
}

pub fn deviation_stats(pairs: &[(BBox, BBox)]) -> Result<DeviationStats, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut high = StatAcc::default();
    let mut low = StatAcc::default();
    let mut coords = [
        StatAcc::default(),
        StatAcc::default(),
        StatAcc::default(),
        StatAcc::default(),
    ];
    for (pseudo, gt) in pairs {
        let q = iou(*pseudo, *gt);
        if q >= 0.5 {
            high.push(q);
        } else {
            low.push(q);
        }
        let p = pseudo.corners();
        let g = gt.corners();
        let extents = [gt.width(), gt.height(), gt.width(), gt.height()];
        for k in 0..4 {
            coords[k].push((p[k] - g[k]) / extents[k]);
        }
    }
    Ok(DeviationStats {
        iou_high: high.finish(),
        iou_low: low.finish(),
        coords: [
            coords[0].finish().unwrap(),
            coords[1].finish().unwrap(),
            coords[2].finish().unwrap(),
            coords[3].finish().unwrap(),
        ],
    })
}

#[derive(Default)]
struct StatAcc {
    n: u64,
    sum: f64,
    sumsq: f64,
}

impl StatAcc {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sumsq += v * v;
    }

    fn finish(&self) -> Option<MeanStd> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 {
            ((self.sumsq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Some(MeanStd {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Average precision for one category at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub category: usize,
    pub ap50: f64,
    /// Mean AP over all evaluated thresholds.
    pub ap_mean: f64,
}

/// COCO-style results: AP at 0.5 and averaged over the threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap50: f64,
    pub ap50_95: f64,
    pub per_class: Vec<ClassAp>,
}

/// The standard 0.50:0.05:0.95 threshold grid.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Greedy-matched, 101-point-interpolated average precision. Detections
/// are ranked by (score desc, scene_id asc, insertion order asc); each
/// ground-truth object is matched at most once per (class, threshold).
/// Categories are the ones present in the ground truth; `ap50` is read at
/// the threshold 0.5 entry of `thresholds`.
pub fn average_precision(
    dets: &[(u64, ScoredBox)],
    scenes: &[Scene],
    thresholds: &[f64],
) -> ApResult {
    assert!(!thresholds.is_empty());
    let mut categories: Vec<usize> = scenes
        .iter()
        .flat_map(|s| s.objects.iter().map(|o| o.category))
        .collect();
    categories.sort_unstable();
    categories.dedup();

    let mut per_class = Vec::with_capacity(categories.len());
    let mut sum_at_threshold = vec![0.0; thresholds.len()];
    for &category in &categories {
        let mut ap_sum = 0.0;
        let mut ap50 = 0.0;
        for (t_idx, &threshold) in thresholds.iter().enumerate() {
            let ap = class_ap(dets, scenes, category, threshold);
            ap_sum += ap;
            sum_at_threshold[t_idx] += ap;
            if (threshold - 0.5).abs() < 1e-9 {
                ap50 = ap;
            }
        }
        per_class.push(ClassAp {
            category,
            ap50,
            ap_mean: ap_sum / thresholds.len() as f64,
        });
    }
    let n_classes = categories.len().max(1) as f64;
    let ap50 = thresholds
        .iter()
        .position(|t| (t - 0.5).abs() < 1e-9)
        .map(|idx| sum_at_threshold[idx] / n_classes)
        .unwrap_or(0.0);
    let ap50_95 = sum_at_threshold.iter().sum::<f64>() / thresholds.len() as f64 / n_classes;
    ApResult {
        ap50,
        ap50_95,
        per_class,
    }
}

fn class_ap(dets: &[(u64, ScoredBox)], scenes: &[Scene], category: usize, threshold: f64) -> f64 {
    // Ground truth boxes of this class, keyed by scene.
    let mut gt: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    for scene in scenes {
        let boxes: Vec<BBox> = scene
            .objects
            .iter()
            .filter(|o| o.category == category)
            .map(|o| o.bbox)
            .collect();
        if !boxes.is_empty() {
            gt.insert(scene.scene_id, boxes);
        }
    }
    let n_gt: usize = gt.values().map(|v| v.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }

    let mut ranked: Vec<(usize, u64, ScoredBox)> = dets
        .iter()
        .enumerate()
        .filter(|(_, (_, d))| d.category == category)
        .map(|(idx, (scene_id, d))| (idx, *scene_id, *d))
        .collect();
    ranked.sort_by(|a, b| {
        b.2.score
            .total_cmp(&a.2.score)
            .then(a.1.cmp(&b.1))
            .then(a.0.cmp(&b.0))
    });

    let mut used: BTreeMap<u64, Vec<bool>> =
        gt.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(ranked.len());
    let mut recalls = Vec::with_capacity(ranked.len());
    for (rank, (_, scene_id, det)) in ranked.iter().enumerate() {
        if let (Some(boxes), Some(flags)) = (gt.get(scene_id), used.get_mut(scene_id)) {
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in boxes.iter().enumerate() {
                if flags[g] {
                    continue;
                }
                let q = iou(det.bbox, *b);
                if q >= threshold && best.map_or(true, |(_, bq)| q > bq) {
                    best = Some((g, q));
                }
            }
            if let Some((g, _)) = best {
                flags[g] = true;
                tp += 1;
            }
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }

    // 101-point interpolation with a running precision max from the tail.
    let mut running = precisions.clone();
    for k in (0..running.len().saturating_sub(1)).rev() {
        running[k] = running[k].max(running[k + 1]);
    }
    let mut ap = 0.0;
    for grid in 0..=100 {
        let r = grid as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map(|idx| running[idx])
            .unwrap_or(0.0);
        ap += p;
    }
    ap / 101.0
}
