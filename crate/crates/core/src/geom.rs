//! Axis-aligned box geometry: IoU, GIoU with analytic gradient, box-delta
//! codecs, clipping to image bounds, and greedy non-maximum suppression.
//!
//! Boxes are corner-parameterized in continuous image coordinates (x grows
//! right, y grows down) and areas are plain `(x2 - x1) * (y2 - y1)` with no
//! pixel-center convention.

use thiserror::Error;

/// Smallest box extent, in pixels, that still counts as non-degenerate.
/// Boxes produced by decoding or clipping are clamped to this extent
/// instead of being rejected, so training never aborts on an extreme
/// network output.
pub const MIN_EXTENT: f64 = 1e-3;

/// Network outputs for log width/height ratios are clamped to this
/// magnitude before exponentiation to keep decoded boxes finite.
const MAX_LOG_RATIO: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): corners must be finite with x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// Axis-aligned bounding box. Validity (finite corners, positive extents)
/// is a construction invariant: every `BBox` in circulation satisfies it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeomError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(GeomError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }

    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    #[inline]
    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Translates both corners by the same offset; validity is preserved.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Scales width and height about the center; `factor` must be positive.
    pub fn scaled_about_center(&self, factor: f64) -> Self {
        debug_assert!(factor > 0.0 && factor.is_finite());
        let (cx, cy) = self.center();
        let hw = 0.5 * self.width() * factor;
        let hh = 0.5 * self.height() * factor;
        Self {
            x1: cx - hw,
            y1: cy - hh,
            x2: cx + hw,
            y2: cy + hh,
        }
    }

    /// True when `(x, y)` lies inside the box (boundary included).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Euclidean distance from a point to the box (zero inside).
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        let dx = (self.x1 - x).max(0.0).max(x - self.x2);
        let dy = (self.y1 - y).max(0.0).max(y - self.y2);
        dx.hypot(dy)
    }
}

/// Dimensionless box offsets: center shifts normalized by the reference
/// width/height plus log width/height ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Delta {
    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

/// A detection candidate: box, score in [0, 1], category index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
}

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Generalized IoU: `iou(a, b) - |C \ (a ∪ b)| / |C|` where `C` is the
/// smallest enclosing box. Lies in (-1, 1].
pub fn giou(a: BBox, b: BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = cw * ch;
    inter / union - (enclosing - union) / enclosing
}

/// GIoU loss `1 - giou(pred, target)` together with its analytic gradient
/// with respect to the four corners of `pred`.
///
/// At exact corner-alignment ties the branch chosen by the max/min
/// comparison is treated as locally constant (the pred corner counts as
/// the active branch), which is the usual subgradient convention.
#[derive(Debug, Clone, Copy)]
pub struct GiouLoss {
    pub loss: f64,
    /// d loss / d (x1, y1, x2, y2) of `pred`.
    pub grad: [f64; 4],
}

pub fn giou_loss_grad(pred: BBox, target: BBox) -> GiouLoss {
    let (px1, py1, px2, py2) = (pred.x1, pred.y1, pred.x2, pred.y2);
    let (tx1, ty1, tx2, ty2) = (target.x1, target.y1, target.x2, target.y2);

    let pw = px2 - px1;
    let ph = py2 - py1;
    let area_p = pw * ph;
    let d_area_p = [-ph, -pw, ph, pw];

    let ix1 = px1.max(tx1);
    let iy1 = py1.max(ty1);
    let ix2 = px2.min(tx2);
    let iy2 = py2.min(ty2);
    let iw = (ix2 - ix1).max(0.0);
    let ih = (iy2 - iy1).max(0.0);
    let inter = iw * ih;

    let overlap = iw > 0.0 && ih > 0.0;
    let mut d_inter = [0.0; 4];
    if overlap {
        if px1 >= tx1 {
            d_inter[0] = -ih;
        }
        if py1 >= ty1 {
            d_inter[1] = -iw;
        }
        if px2 <= tx2 {
            d_inter[2] = ih;
        }
        if py2 <= ty2 {
            d_inter[3] = iw;
        }
    }

    let area_t = (tx2 - tx1) * (ty2 - ty1);
    let union = area_p + area_t - inter;

    let cx1 = px1.min(tx1);
    let cy1 = py1.min(ty1);
    let cx2 = px2.max(tx2);
    let cy2 = py2.max(ty2);
    let cw = cx2 - cx1;
    let ch = cy2 - cy1;
    let enclosing = cw * ch;
    let mut d_enc = [0.0; 4];
    if px1 <= tx1 {
        d_enc[0] = -ch;
    }
    if py1 <= ty1 {
        d_enc[1] = -cw;
    }
    if px2 >= tx2 {
        d_enc[2] = ch;
    }
    if py2 >= ty2 {
        d_enc[3] = cw;
    }

    // giou = inter/union - 1 + union/enclosing
    let value = inter / union - 1.0 + union / enclosing;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area_p[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_pen = (d_union * enclosing - union * d_enc[k]) / (enclosing * enclosing);
        grad[k] = -(d_iou + d_pen);
    }
    GiouLoss {
        loss: 1.0 - value,
        grad,
    }
}

/// Encodes `target` relative to `reference` as a `Delta`.
pub fn encode_delta(reference: BBox, target: BBox) -> Delta {
    let (rcx, rcy) = reference.center();
    let (tcx, tcy) = target.center();
    Delta {
        dx: (tcx - rcx) / reference.width(),
        dy: (tcy - rcy) / reference.height(),
        dw: (target.width() / reference.width()).ln(),
        dh: (target.height() / reference.height()).ln(),
    }
}

/// Box decoded from a delta; `clamped` marks outputs that had to be
/// sanitized (non-finite delta component or extent below [`MIN_EXTENT`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    pub clamped: bool,
}

/// Applies `delta` to `reference`. Degenerate or non-finite outputs are
/// clamped to the minimum extent and flagged rather than rejected.
pub fn decode_delta(reference: BBox, delta: Delta) -> Decoded {
    let mut clamped = false;
    let mut comp = delta.as_array();
    for c in &mut comp {
        if !c.is_finite() {
            *c = 0.0;
            clamped = true;
        }
    }
    let [dx, dy, mut dw, mut dh] = comp;
    if dw.abs() > MAX_LOG_RATIO {
        dw = dw.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        clamped = true;
    }
    if dh.abs() > MAX_LOG_RATIO {
        dh = dh.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        clamped = true;
    }

    let (rcx, rcy) = reference.center();
    let cx = rcx + dx * reference.width();
    let cy = rcy + dy * reference.height();
    let mut w = reference.width() * dw.exp();
    let mut h = reference.height() * dh.exp();
    if w <= MIN_EXTENT {
        w = MIN_EXTENT;
        clamped = true;
    }
    if h <= MIN_EXTENT {
        h = MIN_EXTENT;
        clamped = true;
    }
    let bbox = BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
        .expect("decoded box has positive clamped extents");
    Decoded { bbox, clamped }
}

/// Box clipped to `[0, width] x [0, height]`; `degenerate` marks boxes
/// whose extent collapsed under clipping and was restored to the minimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clipped {
    pub bbox: BBox,
    pub degenerate: bool,
}

pub fn clip(b: BBox, width: f64, height: f64) -> Clipped {
    debug_assert!(width > 0.0 && height > 0.0);
    let mut x1 = b.x1.clamp(0.0, width);
    let mut x2 = b.x2.clamp(0.0, width);
    let mut y1 = b.y1.clamp(0.0, height);
    let mut y2 = b.y2.clamp(0.0, height);
    let mut degenerate = false;
    if x2 - x1 < MIN_EXTENT {
        degenerate = true;
        x1 = x1.min(width - MIN_EXTENT).max(0.0);
        x2 = x1 + MIN_EXTENT;
    }
    if y2 - y1 < MIN_EXTENT {
        degenerate = true;
        y1 = y1.min(height - MIN_EXTENT).max(0.0);
        y2 = y1 + MIN_EXTENT;
    }
    let bbox = BBox::new(x1, y1, x2, y2).expect("clipped box has positive extents");
    Clipped { bbox, degenerate }
}

/// Greedy per-category non-maximum suppression. Candidates are visited in
/// (score desc, x1 asc, y1 asc) order; a kept box suppresses same-category
/// boxes whose IoU with it exceeds `iou_thresh`.
pub fn nms(dets: &[ScoredBox], iou_thresh: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .total_cmp(&dets[i].score)
            .then(dets[i].bbox.x1.total_cmp(&dets[j].bbox.x1))
            .then(dets[i].bbox.y1.total_cmp(&dets[j].bbox.y1))
    });
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for rank in 0..order.len() {
        let i = order[rank];
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[rank + 1..] {
            if !suppressed[j]
                && dets[j].category == dets[i].category
                && iou(dets[i].bbox, dets[j].bbox) > iou_thresh
            {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, -1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 2.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn iou_identity_disjoint_partial() {
        let b = bb(1.0, 2.0, 4.0, 7.0);
        assert_eq!(iou(b, b), 1.0);
        assert_eq!(iou(bb(0.0, 0.0, 1.0, 1.0), bb(2.0, 2.0, 3.0, 3.0)), 0.0);
        // inter 1, union 7
        let v = iou(bb(0.0, 0.0, 2.0, 2.0), bb(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn giou_identity_and_side_by_side() {
        let b = bb(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(b, b), 1.0);
        // enclosing (0,0,3,1), union 2: 0 - 1/3
        let v = giou(bb(0.0, 0.0, 1.0, 1.0), bb(2.0, 0.0, 3.0, 1.0));
        assert!((v + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn giou_limit_far_apart() {
        let a = bb(0.0, 0.0, 1.0, 1.0);
        let b = bb(1e6, 0.0, 1e6 + 1.0, 1.0);
        assert!(giou(a, b) < -0.999);
    }

    #[test]
    fn giou_loss_zero_at_match() {
        let b = bb(0.3, -1.0, 4.0, 2.5);
        let g = giou_loss_grad(b, b);
        assert!(g.loss.abs() < 1e-12);
        assert!(g.grad.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn giou_loss_side_by_side_value() {
        let g = giou_loss_grad(bb(0.0, 0.0, 1.0, 1.0), bb(2.0, 0.0, 3.0, 1.0));
        assert!((g.loss - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn giou_grad_matches_finite_differences() {
        let mut rng = crate::rng::SimRng::new(901);
        let h = 1e-5;
        for _ in 0..200 {
            let pred = random_box(&mut rng);
            let target = random_box(&mut rng);
            let g = giou_loss_grad(pred, target);
            let c = pred.corners();
            for k in 0..4 {
                let mut up = c;
                let mut dn = c;
                up[k] += h;
                dn[k] -= h;
                let lu = giou_loss_grad(bb(up[0], up[1], up[2], up[3]), target).loss;
                let ld = giou_loss_grad(bb(dn[0], dn[1], dn[2], dn[3]), target).loss;
                let fd = (lu - ld) / (2.0 * h);
                let scale = g.grad[k].abs().max(fd.abs()).max(1e-3);
                assert!(
                    (g.grad[k] - fd).abs() / scale < 1e-4,
                    "corner {k}: analytic {} vs fd {fd}",
                    g.grad[k]
                );
            }
        }
    }

    pub(crate) fn random_box(rng: &mut crate::rng::SimRng) -> BBox {
        let x1 = rng.uniform_in(-5.0, 5.0);
        let y1 = rng.uniform_in(-5.0, 5.0);
        let w = rng.uniform_in(0.5, 6.0);
        let h = rng.uniform_in(0.5, 6.0);
        bb(x1, y1, x1 + w, y1 + h)
    }

    #[test]
    fn delta_encode_identity() {
        let b = bb(0.0, 0.0, 2.0, 2.0);
        let d = encode_delta(b, b);
        assert_eq!(d, Delta::default());
    }

    #[test]
    fn delta_decode_center_shift() {
        let d = Delta {
            dx: 0.5,
            dy: 0.0,
            dw: 0.0,
            dh: 0.0,
        };
        let out = decode_delta(bb(0.0, 0.0, 2.0, 2.0), d);
        assert!(!out.clamped);
        let c = out.bbox.corners();
        let expect = [1.0, 0.0, 3.0, 2.0];
        for k in 0..4 {
            assert!((c[k] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_roundtrip_random_pairs() {
        let mut rng = crate::rng::SimRng::new(77);
        for _ in 0..1000 {
            let reference = random_box(&mut rng);
            let target = random_box(&mut rng);
            let out = decode_delta(reference, encode_delta(reference, target));
            assert!(!out.clamped);
            let got = out.bbox.corners();
            let want = target.corners();
            for k in 0..4 {
                assert!((got[k] - want[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decode_clamps_degenerate_and_nonfinite() {
        let reference = bb(0.0, 0.0, 1.0, 1.0);
        let out = decode_delta(
            reference,
            Delta {
                dx: 0.0,
                dy: 0.0,
                dw: -800.0,
                dh: 0.0,
            },
        );
        assert!(out.clamped);
        // Recomputing x2 - x1 from the clamped width loses at most 1 ulp.
        assert!(out.bbox.width() >= MIN_EXTENT * 0.999);
        let out = decode_delta(
            reference,
            Delta {
                dx: f64::NAN,
                dy: 0.0,
                dw: 0.0,
                dh: 0.0,
            },
        );
        assert!(out.clamped);
    }

    #[test]
    fn clip_cases() {
        let c = clip(bb(-1.0, -1.0, 2.0, 2.0), 4.0, 4.0);
        assert!(!c.degenerate);
        assert_eq!(c.bbox, bb(0.0, 0.0, 2.0, 2.0));

        let inside = bb(1.0, 1.0, 3.0, 3.0);
        let c = clip(inside, 4.0, 4.0);
        assert!(!c.degenerate);
        assert_eq!(c.bbox, inside);

        let c = clip(bb(5.0, 5.0, 6.0, 6.0), 4.0, 4.0);
        assert!(c.degenerate);
        assert!(c.bbox.x2() <= 4.0 && c.bbox.y2() <= 4.0);
    }

    #[test]
    fn nms_basic_cases() {
        let b = bb(0.0, 0.0, 2.0, 2.0);
        let single = vec![ScoredBox {
            bbox: b,
            score: 0.7,
            category: 0,
        }];
        assert_eq!(nms(&single, 0.5), single);

        let pair = vec![
            ScoredBox {
                bbox: b,
                score: 0.9,
                category: 1,
            },
            ScoredBox {
                bbox: b,
                score: 0.8,
                category: 1,
            },
        ];
        let kept = nms(&pair, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_greedy_chain() {
        // A suppresses B, but C survives because only the kept box A is
        // compared against it: iou(A,B)=0.6, iou(B,C)=0.524, iou(A,C)=0.28.
        let a = ScoredBox {
            bbox: bb(0.0, 0.0, 8.0, 1.0),
            score: 0.9,
            category: 0,
        };
        let b = ScoredBox {
            bbox: bb(2.0, 0.0, 10.0, 1.0),
            score: 0.8,
            category: 0,
        };
        let c = ScoredBox {
            bbox: bb(4.5, 0.0, 12.5, 1.0),
            score: 0.7,
            category: 0,
        };
        assert!(iou(a.bbox, b.bbox) > 0.5);
        assert!(iou(b.bbox, c.bbox) > 0.5);
        assert!(iou(a.bbox, c.bbox) < 0.5);
        let kept = nms(&[a, b, c], 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.7);
    }

    #[test]
    fn nms_tie_break_is_deterministic() {
        let a = ScoredBox {
            bbox: bb(0.0, 0.0, 1.0, 1.0),
            score: 0.5,
            category: 0,
        };
        let b = ScoredBox {
            bbox: bb(0.2, 0.0, 1.2, 1.0),
            score: 0.5,
            category: 0,
        };
        // Equal scores: lower x1 wins the tie and is visited first.
        let kept = nms(&[b, a], 0.5);
        assert_eq!(kept[0].bbox.x1(), 0.0);
    }
}
