//! Axis-aligned boxes, intersection-over-union and greedy non-maximum
//! suppression.
//!
//! Areas are continuous (`(x2 - x1) * (y2 - y1)`); there is no `+1` pixel
//! convention anywhere in this crate.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{PclError, Result};

/// Axis-aligned box with strictly positive area.
///
/// Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let invalid = |reason| PclError::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(invalid("empty box"));
        }
        Ok(BBox { x1, y1, x2, y2 })
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

    /// Area of the overlap with `other`, zero when disjoint.
    #[inline]
    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = PclError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union of two valid boxes.
#[inline]
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A scored box for one object class. `class_id` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Orders indices by score descending, lower index first on ties.
pub(crate) fn rank_by_score(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression over detections of a single class.
///
/// Keeps the best remaining detection and drops every other detection whose
/// IoU with it exceeds `threshold`. The result is sorted by score, highest
/// first, with ties resolved in input order.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let order = rank_by_score(dets.iter().map(|d| d.score));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(bbox: BBox, score: f64) -> Detection {
        Detection {
            bbox,
            class_id: 1,
            score,
        }
    }

    /// Counts grid cells of side `step` whose centers fall inside each box.
    fn rasterized_iou(a: &BBox, c: &BBox, step: f64) -> f64 {
        let lo_x = a.x1().min(c.x1());
        let hi_x = a.x2().max(c.x2());
        let lo_y = a.y1().min(c.y1());
        let hi_y = a.y2().max(c.y2());
        let nx = ((hi_x - lo_x) / step).round() as usize;
        let ny = ((hi_y - lo_y) / step).round() as usize;
        let inside = |bx: &BBox, x: f64, y: f64| x > bx.x1() && x < bx.x2() && y > bx.y1() && y < bx.y2();
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..nx {
            let x = lo_x + (i as f64 + 0.5) * step;
            for j in 0..ny {
                let y = lo_y + (j as f64 + 0.5) * step;
                let (ia, ic) = (inside(a, x, y), inside(c, x, y));
                inter += (ia && ic) as usize;
                union += (ia || ic) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let unit = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&unit, &unit), 1.0);
        assert_eq!(iou(&unit, &b(2.0, 2.0, 3.0, 3.0)), 0.0);
        // touching edges
        assert_eq!(iou(&unit, &b(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn iou_partial_overlap_matches_raster() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let c = b(5.0, 5.0, 15.0, 15.0);
        let oracle = rasterized_iou(&a, &c, 0.01);
        assert!((oracle - 25.0 / 175.0).abs() < 1e-9);
        assert!((iou(&a, &c) - oracle).abs() < 1e-12);
    }

    #[test]
    fn nms_drops_overlapping_lower_score() {
        // IoU of these two is 0.8
        let hi = det(b(0.0, 0.0, 10.0, 10.0), 0.9);
        let lo = det(b(0.0, 0.0, 10.0, 8.0), 0.7);
        assert!((iou(&hi.bbox, &lo.bbox) - 0.8).abs() < 1e-12);
        assert_eq!(nms(&[lo, hi], 0.3), vec![hi]);
    }

    #[test]
    fn nms_single_and_empty() {
        let d = det(b(1.0, 1.0, 2.0, 2.0), 0.4);
        assert_eq!(nms(&[d], 0.5), vec![d]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let first = det(b(0.0, 0.0, 10.0, 10.0), 0.5);
        let second = det(b(0.5, 0.0, 10.5, 10.0), 0.5);
        assert_eq!(nms(&[first, second], 0.3), vec![first]);
        assert_eq!(nms(&[second, first], 0.3), vec![second]);
    }

    /// Re-derivation of greedy NMS: repeatedly scan for the best remaining
    /// candidate, keep it, and strike out its overlaps.
    fn nms_oracle(dets: &[Detection], threshold: f64) -> Vec<Detection> {
        let mut alive: Vec<usize> = (0..dets.len()).collect();
        let mut out = Vec::new();
        while !alive.is_empty() {
            let mut best = alive[0];
            for &i in &alive {
                if dets[i].score > dets[best].score || (dets[i].score == dets[best].score && i < best) {
                    best = i;
                }
            }
            out.push(dets[best]);
            alive.retain(|&i| i != best && iou(&dets[i].bbox, &dets[best].bbox) <= threshold);
        }
        out
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..80.0f64, 0.0..80.0f64, 1.0..30.0f64, 1.0..30.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    fn arb_dets(n: usize) -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((arb_box(), 0.0..1.0f64), 0..n)
            .prop_map(|v| v.into_iter().map(|(bx, s)| det(bx, s)).collect())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn nms_matches_oracle(dets in arb_dets(10), t in 0.05..0.95f64) {
            prop_assert_eq!(nms(&dets, t), nms_oracle(&dets, t));
        }

        #[test]
        fn nms_properties(dets in arb_dets(25), t in 0.05..0.95f64) {
            let kept = nms(&dets, t);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for c in &kept[i + 1..] {
                    prop_assert!(iou(&a.bbox, &c.bbox) <= t);
                    prop_assert!(a.score >= c.score);
                }
            }
            prop_assert_eq!(nms(&kept, t), kept);
        }
    }
}
