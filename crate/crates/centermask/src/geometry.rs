//! Box and location arithmetic: IOU, feature-to-image coordinate mapping,
//! edge-distance regression targets and their inverse, centerness, and
//! greedy per-class NMS.
//!
//! Coordinates are continuous image pixels. Boxes store their left-top
//! corner `(x0, y0)` and right-bottom corner `(x1, y1)`; areas are plain
//! geometric products with no pixel (+1) convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels with `x0 <= x1`, `y0 <= y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxXYXY {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x1 >= x0 && y1 >= y0) {
            return Err(Error::InvalidArgument(format!(
                "invalid box corners ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(BoxXYXY { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clamp the box to `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> BoxXYXY {
        let x0 = self.x0.clamp(0.0, w);
        let y0 = self.y0.clamp(0.0, h);
        BoxXYXY {
            x0,
            y0,
            x1: self.x1.clamp(x0, w),
            y1: self.y1.clamp(y0, h),
        }
    }

    /// True when `(x, y)` lies strictly inside the box.
    pub fn contains_strict(&self, x: f64, y: f64) -> bool {
        x > self.x0 && x < self.x1 && y > self.y0 && y < self.y1
    }
}

/// A feature-map cell and its mapped image-pixel coordinates.
///
/// The mapping places cell `(p, q)` at stride `r` on image point
/// `(floor(r/2) + p*r, floor(r/2) + q*r)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(p: usize, q: usize, r: usize) -> Result<Self> {
        let (x, y) = map_location(p, q, r)?;
        Ok(Location { p, q, r, x, y })
    }
}

/// Distances from a location to the four edges of a box, in pixels.
/// All four are positive exactly when the location is strictly inside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionTarget {
    pub d_left: f64,
    pub d_top: f64,
    pub d_right: f64,
    pub d_bottom: f64,
}

impl RegressionTarget {
    pub fn as_array(&self) -> [f64; 4] {
        [self.d_left, self.d_top, self.d_right, self.d_bottom]
    }

    pub fn max(&self) -> f64 {
        self.d_left
            .max(self.d_top)
            .max(self.d_right)
            .max(self.d_bottom)
    }

    pub fn all_positive(&self) -> bool {
        self.d_left > 0.0 && self.d_top > 0.0 && self.d_right > 0.0 && self.d_bottom > 0.0
    }
}

/// A scored, classified box. `score` is the product of the classification
/// probability and the centerness probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub box_: BoxXYXY,
    pub class_id: usize,
    pub cls_score: f64,
    pub centerness: f64,
    pub score: f64,
    pub level: usize,
}

impl Detection {
    pub fn new(
        box_: BoxXYXY,
        class_id: usize,
        cls_score: f64,
        centerness: f64,
        level: usize,
    ) -> Self {
        Detection {
            box_,
            class_id,
            cls_score,
            centerness,
            score: cls_score * centerness,
            level,
        }
    }
}

/// Intersection over union of two boxes. Degenerate pairs with zero union
/// area yield 0.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Map feature-map indices `(p, q)` at stride `r` to image coordinates.
pub fn map_location(p: usize, q: usize, r: usize) -> Result<(f64, f64)> {
    if r == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let half = (r / 2) as f64;
    Ok((half + (p * r) as f64, half + (q * r) as f64))
}

/// Distances from a location to each edge of `box_`. Negative components
/// signal that the location lies outside the box on that side.
pub fn regression_targets(loc: &Location, box_: &BoxXYXY) -> RegressionTarget {
    RegressionTarget {
        d_left: loc.x - box_.x0,
        d_top: loc.y - box_.y0,
        d_right: box_.x1 - loc.x,
        d_bottom: box_.y1 - loc.y,
    }
}

/// Inverse of [`regression_targets`]: rebuild the box from a location and
/// its four edge distances. Rejects negative distances.
pub fn decode_box(loc: &Location, t: &RegressionTarget) -> Result<BoxXYXY> {
    if t.d_left < 0.0 || t.d_top < 0.0 || t.d_right < 0.0 || t.d_bottom < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "negative regression distances {:?}",
            t.as_array()
        )));
    }
    Ok(BoxXYXY {
        x0: loc.x - t.d_left,
        y0: loc.y - t.d_top,
        x1: loc.x + t.d_right,
        y1: loc.y + t.d_bottom,
    })
}

/// Centerness of a location inside a box:
/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`.
///
/// When both distances of an opposing pair are zero the value is defined
/// as 0 (degenerate box edge).
pub fn centerness_target(t: &RegressionTarget) -> f64 {
    let horiz = ratio(t.d_left, t.d_right);
    let vert = ratio(t.d_top, t.d_bottom);
    (horiz * vert).sqrt()
}

fn ratio(a: f64, b: f64) -> f64 {
    let max = a.max(b);
    if max <= 0.0 {
        0.0
    } else {
        a.min(b) / max
    }
}

/// Greedy per-class non-maximum suppression.
///
/// Detections are visited by descending score (ties by lower class id,
/// then input order); one is kept iff its IOU with every already-kept
/// detection of the same class is below `iou_thresh`. Output keeps the
/// visiting order, i.e. is sorted by descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    assert!(
        iou_thresh > 0.0 && iou_thresh < 1.0,
        "iou_thresh must be in (0, 1)"
    );
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let candidate = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.class_id == candidate.class_id && iou(&k.box_, &candidate.box_) >= iou_thresh
        });
        if !suppressed {
            kept.push(candidate.clone());
        }
    }
    kept
}
