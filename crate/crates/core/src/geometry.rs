//! Box algebra in normalized image coordinates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized `[0, 1]` image coordinates.
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x_min, y_min, x_max, y_max]: [f64; 4]) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub const UNIT: BBox = BBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 1.0,
        y_max: 1.0,
    };

    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Zero for inverted or degenerate boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && [self.x_min, self.y_min, self.x_max, self.y_max]
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn clip(&self) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, 1.0),
            self.y_min.clamp(0.0, 1.0),
            self.x_max.clamp(0.0, 1.0),
            self.y_max.clamp(0.0, 1.0),
        )
    }

    /// Horizontal flip about the image center.
    pub fn mirror(&self) -> BBox {
        BBox::new(1.0 - self.x_max, self.y_min, 1.0 - self.x_min, self.y_max)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }
}

/// Jaccard overlap. Degenerate boxes contribute no area, so any pair
/// involving one scores 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Center-size log encoding of `gt` relative to `anchor` (no variance scaling).
pub fn encode_offsets(gt: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::Empty(format!("anchor with non-positive size {anchor:?}")));
    }
    let (gw, gh) = (gt.width(), gt.height());
    if !(gw > 0.0 && gh > 0.0) {
        return Err(Error::Empty(format!("ground truth with non-positive size {gt:?}")));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok([(gcx - acx) / aw, (gcy - acy) / ah, (gw / aw).ln(), (gh / ah).ln()])
}

/// Log-scale offsets are clamped here before `exp` so wild early-training
/// predictions stay finite.
const MAX_LOG_SCALE: f64 = 10.0;

/// Inverse of [`encode_offsets`], clipped to the unit square.
pub fn decode_offsets(offsets: &[f64; 4], anchor: &BBox) -> BBox {
    decode_unclipped(offsets, anchor).clip()
}

pub fn decode_unclipped(offsets: &[f64; 4], anchor: &BBox) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let cx = acx + offsets[0] * aw;
    let cy = acy + offsets[1] * ah;
    let w = aw * offsets[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ah * offsets[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// Ranking used by NMS: score descending, then `x_min`, then `y_min`
/// ascending; remaining ties fall back to the remaining coordinates and class.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.bbox.x_max.total_cmp(&b.bbox.x_max))
        .then(a.bbox.y_max.total_cmp(&b.bbox.y_max))
        .then(a.class_id.cmp(&b.class_id))
}

/// Removes zero-area boxes; returns the survivors and how many were dropped.
pub fn drop_degenerate(dets: Vec<Detection>) -> (Vec<Detection>, usize) {
    let before = dets.len();
    let kept: Vec<_> = dets.into_iter().filter(|d| !d.bbox.is_degenerate()).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Greedy per-class non-maximum suppression. Keeps at most `max_keep`
/// detections in total, in rank order.
pub fn nms(dets: &[Detection], iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(max_keep.min(order.len()));
    for cand in order {
        if kept.len() >= max_keep {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(b: [f64; 4], score: f64) -> Detection {
        Detection {
            bbox: b.into(),
            score,
            class_id: 1,
        }
    }

    /// Counts pixel centers on a fine grid that fall inside each box.
    fn grid_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x_min && x < bx.x_max && y >= bx.y_min && y < bx.y_max;
        for i in 0..n {
            for j in 0..n {
                let (x, y) = ((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += usize::from(ia && ib);
                union += usize::from(ia || ib);
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let b = BBox::new(0.1, 0.2, 0.4, 0.7);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&b, &BBox::new(0.5, 0.5, 0.6, 0.6)), 0.0);
        let a = BBox::new(0.0, 0.0, 0.2, 0.2);
        let c = BBox::new(0.1, 0.1, 0.3, 0.3);
        let oracle = grid_iou(&a, &c, 1000);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-9, "grid oracle {oracle}");
        assert!((iou(&a, &c) - oracle).abs() < 1e-9);
    }

    #[test]
    fn degenerate_boxes_have_zero_overlap() {
        let line = BBox::new(0.2, 0.2, 0.2, 0.5);
        assert_eq!(iou(&line, &line), 0.0);
        assert_eq!(iou(&line, &BBox::UNIT), 0.0);
    }

    #[test]
    fn encode_identity_and_scale() {
        let a = BBox::new(0.2, 0.3, 0.4, 0.6);
        assert_eq!(encode_offsets(&a, &a).unwrap(), [0.0, 0.0, 0.0, 0.0]);
        let wide = BBox::new(0.1, 0.3, 0.5, 0.6);
        let off = encode_offsets(&wide, &a).unwrap();
        assert!(off[0].abs() < 1e-12 && off[1].abs() < 1e-12 && off[3].abs() < 1e-12);
        assert!((off[2] - 2f64.ln()).abs() < 1e-12);
        let back = decode_offsets(&[0.0; 4], &a);
        let (got, want): ([f64; 4], [f64; 4]) = (back.into(), a.into());
        assert!(got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-12));
    }

    #[test]
    fn encode_rejects_flat_anchor() {
        let flat = BBox::new(0.2, 0.3, 0.2, 0.6);
        assert!(encode_offsets(&BBox::UNIT, &flat).is_err());
    }

    #[test]
    fn huge_scale_offset_is_clipped_to_image() {
        let a = BBox::new(0.8, 0.4, 0.9, 0.5);
        let out = decode_offsets(&[0.0, 0.0, 3.0, 0.0], &a);
        assert_eq!(out.x_max, 1.0);
        assert!(out.is_valid(), "{out:?}");
        let absurd = decode_offsets(&[0.0, 0.0, 1e9, 1e9], &a);
        assert!(absurd.is_valid(), "{absurd:?}");
    }

    #[test]
    fn nms_examples() {
        let a = det([0.0, 0.0, 0.1, 0.1], 0.9);
        let b = det([0.5, 0.5, 0.6, 0.6], 0.8);
        assert_eq!(nms(&[a, b], 0.45, 50).len(), 2);

        // widths 1.0 vs 0.625 on shared height: IoU 0.625 > 0.45
        let c = det([0.0, 0.0, 0.8, 0.1], 0.9);
        let d = det([0.3, 0.0, 0.8, 0.1], 0.8);
        assert!((iou(&c.bbox, &d.bbox) - 0.625).abs() < 1e-12);
        assert_eq!(nms(&[d, c], 0.45, 50), vec![c]);
        assert!(nms(&[], 0.45, 50).is_empty());
    }

    #[test]
    fn nms_respects_class_and_budget() {
        let mut a = det([0.0, 0.0, 0.5, 0.5], 0.9);
        let mut b = a;
        b.score = 0.8;
        b.class_id = 2;
        assert_eq!(nms(&[a, b], 0.45, 50).len(), 2);
        a.class_id = 2;
        assert_eq!(nms(&[a, b], 0.45, 50).len(), 1);
        let many: Vec<_> = (0..10).map(|i| det([i as f64 * 0.1, 0.0, i as f64 * 0.1 + 0.05, 0.05], 0.5)).collect();
        let kept = nms(&many, 0.45, 3);
        assert_eq!(kept.len(), 3);
        // equal scores: ascending x_min wins
        assert_eq!(kept[0].bbox.x_min, 0.0);
    }

    /// Raising the threshold does not always grow the kept set: A suppresses
    /// A' at 0.4 (letting B through), but at 0.55 A' survives and takes B out.
    #[test]
    fn kept_sets_are_not_nested_across_thresholds() {
        let a = det([0.0, 0.0, 0.3, 0.1], 0.9);
        let a2 = det([0.1, 0.0, 0.4, 0.1], 0.8);
        let b = det([0.15, 0.0, 0.45, 0.1], 0.7);
        let lo = nms(&[a, a2, b], 0.4, 50);
        let hi = nms(&[a, a2, b], 0.55, 50);
        assert!(lo.contains(&b) && !hi.contains(&b));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_translation_invariant(a in arb_box(), b in arb_box(), dx in -0.3..0.3f64, dy in -0.3..0.3f64) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            let (ta, tb) = (a.translate(dx, dy), b.translate(dx, dy));
            prop_assert!((iou(&ta, &tb) - v).abs() < 1e-9);
        }

        #[test]
        fn encode_decode_round_trip(g in arb_box(), a in arb_box()) {
            let back = decode_offsets(&encode_offsets(&g, &a).unwrap(), &a);
            prop_assert!((back.x_min - g.x_min).abs() < 1e-6);
            prop_assert!((back.y_min - g.y_min).abs() < 1e-6);
            prop_assert!((back.x_max - g.x_max).abs() < 1e-6);
            prop_assert!((back.y_max - g.y_max).abs() < 1e-6);
        }

        #[test]
        fn nms_subset_sorted_separated_idempotent(
            boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..40),
            thr in 0.1..0.9f64,
        ) {
            let dets: Vec<_> = boxes.iter().map(|(b, s)| Detection { bbox: *b, score: *s, class_id: 1 }).collect();
            let kept = nms(&dets, thr, 50);
            prop_assert!(kept.iter().all(|k| dets.contains(k)));
            prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(iou(&kept[i].bbox, &kept[j].bbox) <= thr);
                }
            }
            prop_assert_eq!(nms(&kept, thr, 50), kept.clone());
            if let Some(top) = dets.iter().copied().min_by(rank_order) {
                prop_assert_eq!(kept[0], top);
            }
        }
    }
}
