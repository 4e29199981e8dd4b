//! The two pseudo-label polishing networks and their training steps:
//! category re-prediction from ROI features, and context-augmented box
//! refinement trained with a GIoU (or plain L1-on-deltas) objective.

use crate::geom::{clip, decode_delta, encode_delta, giou_loss_grad, BBox, Delta};
use crate::net::{smooth_l1, softmax, softmax_cross_entropy, sgd_step, DenseNet, NetGrads, OptimState};
use crate::rng::SimRng;
use crate::sample::{CategorySample, RegressionSample};
use crate::scene::{roi_align, FeatureMap};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolishError {
    #[error("non-finite loss in {step} step")]
    NonFiniteLoss { step: &'static str },
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

/// Context augmentation parameters. Besides the box itself the augmented
/// set always holds the four diagonal shifts by `gamma * d` (d = diagonal
/// length) and two center-preserving enlargements by `1 + 2 * t * gamma`
/// for t in {1, 2} — seven boxes total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub gamma: f64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { gamma: 0.06 }
    }
}

pub const CONTEXT_BOXES: usize = 7;

/// The ordered context set: original; diagonal shifts (++, +-, -+, --),
/// each axis displaced by `gamma * d / sqrt(2)`; enlargements for t = 1, 2.
pub fn context_boxes(bbox: BBox, gamma: f64) -> [BBox; CONTEXT_BOXES] {
    let d = bbox.diagonal();
    let shift = gamma * d / std::f64::consts::SQRT_2;
    [
        bbox,
        bbox.translated(shift, shift),
        bbox.translated(shift, -shift),
        bbox.translated(-shift, shift),
        bbox.translated(-shift, -shift),
        bbox.scaled_about_center(1.0 + 2.0 * gamma),
        bbox.scaled_about_center(1.0 + 4.0 * gamma),
    ]
}

/// Category polishing network: flattened ROI feature through two fully
/// connected layers to logits over K foreground classes plus background.
#[derive(Debug, Clone)]
pub struct CategoryPolisher {
    pub roi_resolution: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub net: DenseNet,
}

/// Outcome of category polishing: `category` is `None` for background.
#[derive(Debug, Clone)]
pub struct CategoryPrediction {
    pub category: Option<usize>,
    /// Probability of the predicted entry.
    pub confidence: f64,
    /// Softmax over K + 1 entries (background last).
    pub probs: Vec<f64>,
}

impl CategoryPolisher {
    pub fn new(
        roi_resolution: usize,
        channels: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut SimRng,
    ) -> Self {
        let input = roi_resolution * roi_resolution * channels;
        Self {
            roi_resolution,
            channels,
            num_classes,
            net: DenseNet::init(&[input, hidden, num_classes + 1], rng),
        }
    }

    pub fn background_index(&self) -> usize {
        self.num_classes
    }

    fn features(&self, map: &FeatureMap, bbox: BBox) -> Vec<f64> {
        roi_align(map, bbox, self.roi_resolution)
    }

    /// Re-predicts the category of the object behind `bbox`. Argmax ties
    /// break toward the lowest class index.
    pub fn polish(&self, map: &FeatureMap, bbox: BBox) -> CategoryPrediction {
        let logits = self.net.infer(&self.features(map, bbox));
        let probs = softmax(&logits);
        let mut best = 0usize;
        for (k, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = k;
            }
        }
        CategoryPrediction {
            category: (best < self.num_classes).then_some(best),
            confidence: probs[best],
            probs,
        }
    }
}

/// Loss used to train the box polisher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxLossKind {
    Giou,
    L1,
}

/// Bounds on the predicted delta. Center shifts beyond a few box extents
/// or log-ratios beyond +/-4 are never sensible refinements; the clamp
/// keeps decoded boxes near the input and, treated as locally constant,
/// leaves a restoring gradient on the unclamped components.
const DELTA_XY_BOUND: f64 = 8.0;
const DELTA_WH_BOUND: f64 = 4.0;

fn bound_delta(raw: [f64; 4]) -> ([f64; 4], [bool; 4]) {
    let bounds = [
        DELTA_XY_BOUND,
        DELTA_XY_BOUND,
        DELTA_WH_BOUND,
        DELTA_WH_BOUND,
    ];
    let mut out = [0.0; 4];
    let mut clamped = [false; 4];
    for k in 0..4 {
        let v = if raw[k].is_finite() { raw[k] } else { 0.0 };
        out[k] = v.clamp(-bounds[k], bounds[k]);
        clamped[k] = out[k] != v || !raw[k].is_finite();
    }
    (out, clamped)
}

/// Box polishing network: ROI features of the seven context boxes,
/// concatenated, through a four-layer network to a box delta.
#[derive(Debug, Clone)]
pub struct BoxPolisher {
    pub roi_resolution: usize,
    pub channels: usize,
    pub ctx: ContextConfig,
    pub net: DenseNet,
}

impl BoxPolisher {
    pub fn new(
        roi_resolution: usize,
        channels: usize,
        hidden: [usize; 3],
        ctx: ContextConfig,
        rng: &mut SimRng,
    ) -> Self {
        let input = CONTEXT_BOXES * roi_resolution * roi_resolution * channels;
        let mut net = DenseNet::init(&[input, hidden[0], hidden[1], hidden[2], 4], rng);
        // Start at (nearly) the identity refinement: a freshly initialized
        // head otherwise predicts O(1) random deltas whose decoded boxes
        // are far off, and training collapses to a constant output.
        net.scale_output_layer(0.01);
        Self {
            roi_resolution,
            channels,
            ctx,
            net,
        }
    }

    /// Concatenated ROI features over the context set. Augmented boxes may
    /// exceed the image; ROI extraction zero-pads there.
    pub fn features(&self, map: &FeatureMap, bbox: BBox) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(CONTEXT_BOXES * self.roi_resolution * self.roi_resolution * self.channels);
        for ctx_box in context_boxes(bbox, self.ctx.gamma) {
            out.extend(roi_align(map, ctx_box, self.roi_resolution));
        }
        out
    }

    /// Refined box: predicted delta (bounded as in training) decoded
    /// against the input box and clipped to the map bounds.
    pub fn polish(&self, map: &FeatureMap, bbox: BBox) -> BBox {
        let out = self.net.infer(&self.features(map, bbox));
        let (bounded, _) = bound_delta([out[0], out[1], out[2], out[3]]);
        let decoded = decode_delta(bbox, Delta::from_array(bounded));
        clip(decoded.bbox, map.width() as f64, map.height() as f64).bbox
    }
}

/// One SGD step of the category polisher on a batch; returns the mean
/// cross-entropy loss.
pub fn train_category_step(
    polisher: &mut CategoryPolisher,
    batch: &[(&CategorySample, &FeatureMap)],
    opt: &mut OptimState,
) -> Result<f64, PolishError> {
    assert!(!batch.is_empty(), "empty category batch");
    let background = polisher.background_index();
    let mut total = NetGrads::zeros_like(&polisher.net);
    let mut loss_sum = 0.0;
    for (sample, map) in batch {
        let x = polisher.features(map, sample.bbox);
        let (logits, cache) = polisher.net.forward(&x);
        let target = sample.target.unwrap_or(background);
        let (loss, dlogits) = softmax_cross_entropy(&logits, target);
        loss_sum += loss;
        let (grads, _) = polisher.net.backward(&cache, &dlogits);
        total.add_scaled(&grads, 1.0);
    }
    let mean = loss_sum / batch.len() as f64;
    if !mean.is_finite() {
        return Err(PolishError::NonFiniteLoss { step: "category" });
    }
    total.scale(1.0 / batch.len() as f64);
    sgd_step(&mut polisher.net, &total, opt)?;
    Ok(mean)
}

/// One SGD step of the box polisher on a batch; returns the mean loss.
///
/// With `BoxLossKind::Giou` the loss is `1 - giou(decode(input, net(x)),
/// target)` and the gradient is chained analytically through the decode.
/// With `BoxLossKind::L1` the network output is regressed onto
/// `encode_delta(input, target)` with pure L1.
pub fn train_box_step(
    polisher: &mut BoxPolisher,
    batch: &[(&RegressionSample, &FeatureMap)],
    opt: &mut OptimState,
    loss_kind: BoxLossKind,
) -> Result<f64, PolishError> {
    assert!(!batch.is_empty(), "empty regression batch");
    let mut total = NetGrads::zeros_like(&polisher.net);
    let mut loss_sum = 0.0;
    for (sample, map) in batch {
        let x = polisher.features(map, sample.input);
        let (out, cache) = polisher.net.forward(&x);
        let pred = [out[0], out[1], out[2], out[3]];
        let (loss, dout) = match loss_kind {
            BoxLossKind::Giou => {
                let (bounded, was_clamped) = bound_delta(pred);
                let decoded = decode_delta(sample.input, Delta::from_array(bounded));
                let g = giou_loss_grad(decoded.bbox, sample.target);
                if decoded.clamped {
                    // Extent still degenerate after bounding (tiny
                    // reference box): keep the loss, skip the gradient.
                    (g.loss, [0.0; 4])
                } else {
                    let mut dout = chain_through_decode(sample.input, decoded.bbox, g.grad);
                    for (d, clamped) in dout.iter_mut().zip(was_clamped) {
                        if clamped {
                            *d = 0.0;
                        }
                    }
                    (g.loss, dout)
                }
            }
            BoxLossKind::L1 => {
                let target = encode_delta(sample.input, sample.target).as_array();
                let (loss, grad) = smooth_l1(&pred, &target, 0.0);
                (loss, [grad[0], grad[1], grad[2], grad[3]])
            }
        };
        loss_sum += loss;
        let (grads, _) = polisher.net.backward(&cache, &dout);
        total.add_scaled(&grads, 1.0);
    }
    let mean = loss_sum / batch.len() as f64;
    if !mean.is_finite() {
        return Err(PolishError::NonFiniteLoss { step: "box" });
    }
    total.scale(1.0 / batch.len() as f64);
    sgd_step(&mut polisher.net, &total, opt)?;
    Ok(mean)
}

/// Chain rule through `decode_delta`: corner gradients of the decoded box
/// become gradients with respect to the delta components.
///
/// With reference extents (wr, hr) and decoded extents (w, h):
///   x1 = cx - w/2, x2 = cx + w/2, cx = cxr + dx*wr, w = wr*exp(dw)
/// so d/d dx = (g_x1 + g_x2)*wr and d/d dw = (g_x2 - g_x1)*w/2.
fn chain_through_decode(reference: BBox, decoded: BBox, corner_grad: [f64; 4]) -> [f64; 4] {
    let [gx1, gy1, gx2, gy2] = corner_grad;
    let wr = reference.width();
    let hr = reference.height();
    let w = decoded.width();
    let h = decoded.height();
    [
        (gx1 + gx2) * wr,
        (gy1 + gy2) * hr,
        (gx2 - gx1) * 0.5 * w,
        (gy2 - gy1) * 0.5 * h,
    ]
}
