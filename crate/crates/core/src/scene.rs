//! Synthetic world: scene generation, deterministic feature-map rendering
//! with a context signal around objects, ROI feature extraction, proposal
//! generation, and a noisy teacher oracle.
//!
//! The feature map stands in for backbone features at image resolution
//! (stride 1). Grid cell `(y, x)` holds the value at the pixel center
//! `(x + 0.5, y + 0.5)` in continuous coordinates; bilinear sampling and
//! ROI extraction follow that convention.

use crate::geom::{clip, iou, BBox};
use crate::rng::{stream, tags, SimRng};
use crate::sample::perturb_box;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    BadConfig(String),
}

/// An annotated object: category index in `[0, num_classes)` plus box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthObject {
    pub category: usize,
    pub bbox: BBox,
}

// Objects serialize as the flat tuple [category, x1, y1, x2, y2].
impl Serialize for GroundTruthObject {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let c = self.bbox.corners();
        (self.category, c[0], c[1], c[2], c[3]).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GroundTruthObject {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let (category, x1, y1, x2, y2) = <(usize, f64, f64, f64, f64)>::deserialize(deserializer)?;
        let bbox = BBox::new(x1, y1, x2, y2).map_err(D::Error::custom)?;
        Ok(Self { category, bbox })
    }
}

/// A synthetic ground-truth world. Generated scenes hold between 1 and
/// `max_objects` objects whose pairwise IoU stays below the overlap cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub scene_id: u64,
    pub objects: Vec<GroundTruthObject>,
}

/// GT-stripped view of a scene handed to training code paths.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledScene {
    pub width: f64,
    pub height: f64,
    pub scene_id: u64,
}

impl Scene {
    pub fn unlabeled(&self) -> UnlabeledScene {
        UnlabeledScene {
            width: self.width,
            height: self.height,
            scene_id: self.scene_id,
        }
    }
}

/// Teacher output for one unannotated object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoDetection {
    pub bbox: BBox,
    pub category: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub width: f64,
    pub height: f64,
    pub num_classes: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub overlap_cap: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            width: 64.0,
            height: 48.0,
            num_classes: 8,
            max_objects: 3,
            min_object_size: 8.0,
            max_object_size: 24.0,
            overlap_cap: 0.3,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_classes < 2 {
            return Err(SceneError::BadConfig("num_classes must be >= 2".into()));
        }
        if self.min_object_size < 8.0 {
            return Err(SceneError::BadConfig("min_object_size must be >= 8".into()));
        }
        if self.max_object_size < self.min_object_size {
            return Err(SceneError::BadConfig(
                "max_object_size must be >= min_object_size".into(),
            ));
        }
        if self.width < self.max_object_size || self.height < self.max_object_size {
            return Err(SceneError::BadConfig(
                "scene must be at least max_object_size on each side".into(),
            ));
        }
        if self.max_objects == 0 {
            return Err(SceneError::BadConfig("max_objects must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_cap) {
            return Err(SceneError::BadConfig("overlap_cap must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub channels: usize,
    /// Std of the i.i.d. Gaussian background noise.
    pub noise_std: f64,
    /// Context falloff scale in units of box diagonals.
    pub context_sigma: f64,
    /// Global seed for the per-category signature vectors.
    pub signature_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            channels: 10,
            noise_std: 0.05,
            context_sigma: 0.2,
            signature_seed: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherOracleConfig {
    pub theta_noise: f64,
    pub flip_rate: f64,
    pub miss_rate: f64,
    pub conf_slope: f64,
    pub conf_offset: f64,
    pub conf_noise_std: f64,
}

impl Default for TeacherOracleConfig {
    fn default() -> Self {
        Self {
            theta_noise: 0.2,
            flip_rate: 0.15,
            miss_rate: 0.05,
            conf_slope: 8.0,
            conf_offset: 0.5,
            conf_noise_std: 0.05,
        }
    }
}

/// Confidence multiplier applied to category-flipped oracle detections.
const FLIP_CONFIDENCE_FACTOR: f64 = 1.0 - 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub stride: f64,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    /// Jittered copies of each annotated object added on top of the grid.
    pub n_jitter: usize,
    pub theta_prop: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            stride: 8.0,
            scales: vec![10.0, 16.0, 24.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            n_jitter: 48,
            theta_prop: 0.5,
        }
    }
}

/// Dense feature grid, `channels x height x width`, image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.values[i] = v;
    }

    /// Bilinear sample of channel `c` at the continuous image point
    /// `(x, y)`; grid values sit at pixel centers and taps outside the
    /// grid read zero.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> f64 {
        let u = x - 0.5;
        let v = y - 0.5;
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let x0 = x0 as i64;
        let y0 = y0 as i64;
        let tap = |yy: i64, xx: i64| -> f64 {
            if yy < 0 || xx < 0 || yy >= self.height as i64 || xx >= self.width as i64 {
                0.0
            } else {
                self.get(c, yy as usize, xx as usize)
            }
        };
        (1.0 - fy) * ((1.0 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1))
            + fy * ((1.0 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1))
    }
}

/// Unit-norm signature vector for a category, derived deterministically
/// from the category index and the global signature seed.
///
/// Channel 0 is excited positively by every category, so box-shaped
/// structure is readable without knowing the category; channel
/// `1 + category` (when available) carries the category identity; a small
/// seeded random component spreads over all channels. Configurations
/// should use `channels >= num_classes + 2` so every category gets its
/// own slot — beyond that, categories rely on the random part alone.
pub fn category_signature(config: &FeatureConfig, category: usize) -> Vec<f64> {
    let mut rng = SimRng::with_stream(
        config.signature_seed,
        stream(tags::SIGNATURE, category as u64),
    );
    let mut v: Vec<f64> = (0..config.channels).map(|_| 0.15 * rng.normal()).collect();
    v[0] += 1.0;
    if 1 + category < config.channels {
        v[1 + category] += 1.0;
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    for a in &mut v {
        *a /= norm;
    }
    v
}

/// Uniformly places 1..=max_objects boxes with bounded pairwise overlap.
/// If rejection sampling fails 1000 times for an object the scene is
/// emitted with fewer objects.
pub fn generate_scene(config: &SceneGenConfig, scene_id: u64, rng: &mut SimRng) -> Scene {
    debug_assert!(config.validate().is_ok());
    let count = 1 + rng.index(config.max_objects);
    let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(count);
    'outer: for _ in 0..count {
        for _attempt in 0..1000 {
            let w = rng.uniform_in(config.min_object_size, config.max_object_size);
            let h = rng.uniform_in(config.min_object_size, config.max_object_size);
            let x1 = rng.uniform_in(0.0, config.width - w);
            let y1 = rng.uniform_in(0.0, config.height - h);
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h).expect("positive extents by construction");
            if objects.iter().all(|o| iou(o.bbox, bbox) <= config.overlap_cap) {
                let category = rng.index(config.num_classes);
                objects.push(GroundTruthObject { category, bbox });
                continue 'outer;
            }
        }
        break;
    }
    Scene {
        width: config.width,
        height: config.height,
        scene_id,
        objects,
    }
}

/// Renders the deterministic feature map for a scene: each object adds its
/// category signature times a spatial mask (1 inside the box, Gaussian
/// falloff outside, distance measured in box diagonals), plus i.i.d.
/// background noise.
pub fn render_features(scene: &Scene, config: &FeatureConfig, rng: &mut SimRng) -> FeatureMap {
    let h = scene.height.ceil() as usize;
    let w = scene.width.ceil() as usize;
    let c = config.channels;
    let mut map = FeatureMap::zeros(c, h, w);
    for obj in &scene.objects {
        let sig = category_signature(config, obj.category);
        let diag = obj.bbox.diagonal();
        let denom = 2.0 * config.context_sigma * config.context_sigma;
        for y in 0..h {
            let py = y as f64 + 0.5;
            for x in 0..w {
                let px = x as f64 + 0.5;
                let mask = if obj.bbox.contains(px, py) {
                    1.0
                } else {
                    let r = obj.bbox.distance_to(px, py) / diag;
                    (-r * r / denom).exp()
                };
                for (ch, s) in sig.iter().enumerate() {
                    let i = map.idx(ch, y, x);
                    map.values[i] += s * mask;
                }
            }
        }
    }
    if config.noise_std > 0.0 {
        for v in &mut map.values {
            *v += config.noise_std * rng.normal();
        }
    }
    map
}

/// Feature map for a scene under the global seed, rendered on the scene's
/// own noise stream so maps are reproducible independently of when they
/// are requested.
pub fn map_for_scene(scene: &Scene, config: &FeatureConfig, seed: u64) -> FeatureMap {
    let mut rng = SimRng::with_stream(seed, stream(tags::FEATURES, scene.scene_id));
    render_features(scene, config, &mut rng)
}

/// ROI feature extraction: the box is divided into `resolution^2` equal
/// bins and each bin center is bilinearly sampled once per channel.
/// Output layout is channel-major: `index = (c * P + by) * P + bx`.
pub fn roi_align(map: &FeatureMap, bbox: BBox, resolution: usize) -> Vec<f64> {
    assert!(resolution >= 1);
    let p = resolution;
    let bw = bbox.width() / p as f64;
    let bh = bbox.height() / p as f64;
    let mut out = vec![0.0; map.channels() * p * p];
    for c in 0..map.channels() {
        for by in 0..p {
            let cy = bbox.y1() + (by as f64 + 0.5) * bh;
            for bx in 0..p {
                let cx = bbox.x1() + (bx as f64 + 0.5) * bw;
                out[(c * p + by) * p + bx] = map.sample_bilinear(c, cx, cy);
            }
        }
    }
    out
}

/// Anchor-grid proposals: for every stride cell center, one box per
/// (scale, aspect ratio) pair, clipped to the bounds with degenerate
/// results dropped. Uses no randomness and no ground truth.
pub fn anchor_proposals(width: f64, height: f64, config: &ProposalConfig) -> Vec<BBox> {
    let mut out = Vec::new();
    let mut cy = config.stride * 0.5;
    while cy < height {
        let mut cx = config.stride * 0.5;
        while cx < width {
            for &scale in &config.scales {
                for &ratio in &config.aspect_ratios {
                    let aw = scale * ratio.sqrt();
                    let ah = scale / ratio.sqrt();
                    if let Ok(b) =
                        BBox::new(cx - 0.5 * aw, cy - 0.5 * ah, cx + 0.5 * aw, cy + 0.5 * ah)
                    {
                        let clipped = clip(b, width, height);
                        if !clipped.degenerate {
                            out.push(clipped.bbox);
                        }
                    }
                }
            }
            cx += config.stride;
        }
        cy += config.stride;
    }
    out
}

/// Proposals for an annotated scene: the anchor grid plus `n_jitter`
/// perturbed copies of every object.
pub fn generate_proposals(scene: &Scene, config: &ProposalConfig, rng: &mut SimRng) -> Vec<BBox> {
    let mut out = anchor_proposals(scene.width, scene.height, config);
    for obj in &scene.objects {
        for _ in 0..config.n_jitter {
            if let Ok(b) = perturb_box(obj.bbox, config.theta_prop, rng) {
                let clipped = clip(b, scene.width, scene.height);
                if !clipped.degenerate {
                    out.push(clipped.bbox);
                }
            }
        }
    }
    out
}

/// Proposals for a scene under the global seed, on the scene's own stream.
pub fn proposals_for_scene(scene: &Scene, config: &ProposalConfig, seed: u64) -> Vec<BBox> {
    let mut rng = SimRng::with_stream(seed, stream(tags::PROPOSALS, scene.scene_id));
    generate_proposals(scene, config, &mut rng)
}

/// Noisy teacher stand-in: perturbs, sometimes drops or category-flips
/// each object, and models confidence as a noisy sigmoid of the box
/// quality. Per object the draw order is fixed: miss, box noise, flip,
/// flip target, confidence noise; draws whose rate/scale is zero are
/// skipped entirely.
pub fn oracle_teacher_labels(
    scene: &Scene,
    num_classes: usize,
    config: &TeacherOracleConfig,
    rng: &mut SimRng,
) -> Vec<PseudoDetection> {
    let mut out = Vec::new();
    for obj in &scene.objects {
        if config.miss_rate > 0.0 && rng.uniform() < config.miss_rate {
            continue;
        }
        let Ok(raw) = perturb_box(obj.bbox, config.theta_noise, rng) else {
            continue;
        };
        let bbox = clip(raw, scene.width, scene.height).bbox;
        let flipped = config.flip_rate > 0.0 && rng.uniform() < config.flip_rate;
        let category = if flipped {
            let mut c = rng.index(num_classes - 1);
            if c >= obj.category {
                c += 1;
            }
            c
        } else {
            obj.category
        };
        let quality = iou(bbox, obj.bbox);
        let mut confidence = sigmoid(config.conf_slope * (quality - config.conf_offset));
        if config.conf_noise_std > 0.0 {
            confidence += config.conf_noise_std * rng.normal();
        }
        if flipped {
            confidence *= FLIP_CONFIDENCE_FACTOR;
        }
        out.push(PseudoDetection {
            bbox,
            category,
            confidence: confidence.clamp(0.01, 0.99),
        });
    }
    out
}

/// Oracle detections for a scene under the global seed, on the scene's
/// own stream.
pub fn oracle_for_scene(
    scene: &Scene,
    num_classes: usize,
    config: &TeacherOracleConfig,
    seed: u64,
) -> Vec<PseudoDetection> {
    let mut rng = SimRng::with_stream(seed, stream(tags::ORACLE, scene.scene_id));
    oracle_teacher_labels(scene, num_classes, config, &mut rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A dataset: annotated scenes for supervised training and unannotated
/// scenes whose ground truth is reserved for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub gen_config: SceneGenConfig,
    pub oracle_config: TeacherOracleConfig,
    pub seed: u64,
    pub annotated: Vec<Scene>,
    pub unannotated: Vec<Scene>,
}

/// Generates a split with disjoint scene-id ranges: annotated scenes get
/// ids `0..n_annotated`, unannotated ones follow.
pub fn make_split(
    n_annotated: usize,
    n_unannotated: usize,
    gen_config: &SceneGenConfig,
    oracle_config: &TeacherOracleConfig,
    seed: u64,
) -> DatasetSplit {
    let scene = |id: u64| {
        let mut rng = SimRng::with_stream(seed, stream(tags::SCENE_GEN, id));
        generate_scene(gen_config, id, &mut rng)
    };
    let annotated = (0..n_annotated as u64).map(scene).collect();
    let unannotated = (n_annotated as u64..(n_annotated + n_unannotated) as u64)
        .map(scene)
        .collect();
    DatasetSplit {
        gen_config: gen_config.clone(),
        oracle_config: oracle_config.clone(),
        seed,
        annotated,
        unannotated,
    }
}
