//! Anchor-free detection head: per-location classification, centerness and
//! 4-distance regression over every pyramid level, plus target assignment,
//! the three training losses, and score/NMS decoding into detections.

use crate::backbone::{var, BoundVars};
use crate::error::{Error, Result};
use crate::geometry::{self, BoxXYXY, Detection, Location, RegressionTarget};
use crate::params::ParamStore;
use crate::tape::{RegLossTarget, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub classes: usize,
    /// Shared 3x3 conv layers applied before the three branch convs.
    pub tower_convs: usize,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub pre_nms_topk: usize,
    pub max_dets: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Initial background probability of the classification branch; its
    /// bias starts at logit(prior) so the focal loss does not blow up on
    /// the all-background start.
    pub cls_prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            classes: 2,
            tower_convs: 2,
            score_thresh: 0.05,
            nms_thresh: 0.5,
            pre_nms_topk: 200,
            max_dets: 100,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            cls_prior: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score_thresh", self.score_thresh), ("nms_thresh", self.nms_thresh)] {
            if !(0.0..1.0).contains(&v) || v == 0.0 {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Regression range (inclusive ends) per pyramid level: the standard
/// bounds 0/64/128/256/512 pixels, with the last configured level opened
/// to infinity.
pub fn level_ranges(levels: usize) -> Vec<(f64, f64)> {
    const BOUNDS: [f64; 5] = [0.0, 64.0, 128.0, 256.0, 512.0];
    (0..levels)
        .map(|i| {
            let lo = BOUNDS[i.min(4)];
            let hi = if i + 1 >= levels { f64::INFINITY } else { BOUNDS[i + 1] };
            (lo, hi)
        })
        .collect()
}

/// Spatial geometry of one head level.
#[derive(Clone, Copy, Debug)]
pub struct LevelShape {
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

/// Raw head outputs of one level, as plain tensors.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub cls: Tensor,
    pub ctr: Tensor,
    pub reg: Tensor,
    pub shape: LevelShape,
}

/// Raw head outputs across all levels.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub levels: Vec<LevelOutput>,
}

/// Per-location training targets of one level, parallel arrays of length
/// `h * w` in row-major location order.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    pub shape: LevelShape,
    /// Target class per location, -1 for background.
    pub class: Vec<i32>,
    /// Edge distances (left, top, right, bottom); valid where `class >= 0`.
    pub reg: Vec<[f64; 4]>,
    /// Centerness target; valid where `class >= 0`.
    pub centerness: Vec<f64>,
    /// Matched ground-truth index, -1 for background.
    pub gt_index: Vec<i32>,
}

#[derive(Clone, Debug)]
pub struct TargetAssignment {
    pub levels: Vec<LevelTargets>,
    pub num_pos: usize,
}

impl TargetAssignment {
    /// Count of positive locations matched to each of `n_gt` boxes.
    pub fn positives_per_gt(&self, n_gt: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n_gt];
        for level in &self.levels {
            for &g in &level.gt_index {
                if g >= 0 {
                    counts[g as usize] += 1;
                }
            }
        }
        counts
    }
}

/// Assign every pyramid location a class, regression and centerness target.
///
/// A location is a candidate for a ground-truth box when it lies strictly
/// inside it and the largest edge distance falls inside the level's range;
/// ambiguity goes to the smallest box area (ties to the lowest GT index).
pub fn assign_targets(
    shapes: &[LevelShape],
    gt: &[(usize, BoxXYXY)],
    ranges: &[(f64, f64)],
) -> TargetAssignment {
    assert_eq!(shapes.len(), ranges.len(), "one range per level");
    let mut levels = Vec::with_capacity(shapes.len());
    let mut num_pos = 0usize;
    for (shape, &(lo, hi)) in shapes.iter().zip(ranges) {
        let n = shape.h * shape.w;
        let mut class = vec![-1i32; n];
        let mut reg = vec![[0.0f64; 4]; n];
        let mut centerness = vec![0.0f64; n];
        let mut gt_index = vec![-1i32; n];
        for q in 0..shape.h {
            for p in 0..shape.w {
                let loc = Location::new(p, q, shape.stride).expect("stride >= 1");
                let mut best: Option<(f64, usize, RegressionTarget)> = None;
                for (gi, (_, b)) in gt.iter().enumerate() {
                    let t = geometry::regression_targets(&loc, b);
                    if !t.all_positive() {
                        continue;
                    }
                    let max_d = t.max();
                    if max_d < lo || max_d > hi {
                        continue;
                    }
                    let area = b.area();
                    let better = match &best {
                        None => true,
                        Some((best_area, _, _)) => area < *best_area,
                    };
                    if better {
                        best = Some((area, gi, t));
                    }
                }
                if let Some((_, gi, t)) = best {
                    let i = q * shape.w + p;
                    class[i] = gt[gi].0 as i32;
                    reg[i] = t.as_array();
                    centerness[i] = geometry::centerness_target(&t);
                    gt_index[i] = gi as i32;
                    num_pos += 1;
                }
            }
        }
        levels.push(LevelTargets {
            shape: *shape,
            class,
            reg,
            centerness,
            gt_index,
        });
    }
    TargetAssignment { levels, num_pos }
}

pub fn register_params(store: &mut ParamStore, cfg: &HeadConfig, width: usize, seed: u64) {
    for j in 0..cfg.tower_convs {
        crate::backbone::register_conv(store, &format!("head.tower.conv{j}"), width, width, 3, seed);
    }
    crate::backbone::register_conv(store, "head.cls", cfg.classes, width, 3, seed);
    crate::backbone::register_conv(store, "head.ctr", 1, width, 3, seed);
    crate::backbone::register_conv(store, "head.reg", 4, width, 3, seed);
    // Focal-loss prior: start classification at a low foreground
    // probability instead of 0.5.
    let prior = cfg.cls_prior.clamp(1e-6, 0.5);
    let bias = (prior / (1.0 - prior)).ln();
    for v in store.get_mut("head.cls.bias").data_mut() {
        *v = bias;
    }
}

/// Head outputs of one level on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutputVars {
    pub cls: Var,
    pub ctr: Var,
    pub reg: Var,
}

/// Run the shared tower and the three branch convs on each pyramid level.
/// Weights are shared across levels.
pub fn head_forward_t(
    tape: &mut Tape,
    pyramid: &[Var],
    vars: &BoundVars,
    cfg: &HeadConfig,
) -> Vec<LevelOutputVars> {
    pyramid
        .iter()
        .map(|&p| {
            let mut cur = p;
            for j in 0..cfg.tower_convs {
                let w = var(vars, &format!("head.tower.conv{j}.weight"));
                let b = var(vars, &format!("head.tower.conv{j}.bias"));
                let y = tape.conv2d(cur, w, b, 1, 1);
                cur = tape.relu(y);
            }
            let cls = tape.conv2d(cur, var(vars, "head.cls.weight"), var(vars, "head.cls.bias"), 1, 1);
            let ctr = tape.conv2d(cur, var(vars, "head.ctr.weight"), var(vars, "head.ctr.bias"), 1, 1);
            let reg = tape.conv2d(cur, var(vars, "head.reg.weight"), var(vars, "head.reg.bias"), 1, 1);
            LevelOutputVars { cls, ctr, reg }
        })
        .collect()
}

/// The three detection losses as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLossVars {
    pub cls: Var,
    pub reg: Var,
    pub ctr: Var,
}

/// Focal classification loss over all levels, normalized by the number of
/// positive locations (at least 1).
pub fn focal_cls_loss_t(
    tape: &mut Tape,
    outputs: &[LevelOutputVars],
    targets: &TargetAssignment,
    cfg: &HeadConfig,
) -> Var {
    let mut parts = Vec::new();
    for (out, lt) in outputs.iter().zip(&targets.levels) {
        let sum = tape.focal_loss_sum(out.cls, lt.class.clone(), cfg.focal_alpha, cfg.focal_gamma);
        parts.push((sum, 1.0));
    }
    let total = tape.sum_weighted(&parts);
    tape.scale(total, 1.0 / targets.num_pos.max(1) as f64)
}

/// IOU regression loss (`-ln IOU`), averaged over positive locations with
/// centerness-target weights.
pub fn iou_reg_loss_t(
    tape: &mut Tape,
    outputs: &[LevelOutputVars],
    targets: &TargetAssignment,
) -> Var {
    let mut weight_sum = 0.0;
    let mut parts = Vec::new();
    for (out, lt) in outputs.iter().zip(&targets.levels) {
        let mut level_targets = Vec::new();
        for (i, &cls) in lt.class.iter().enumerate() {
            if cls >= 0 {
                level_targets.push(RegLossTarget {
                    loc: i,
                    target: lt.reg[i],
                    weight: lt.centerness[i],
                });
                weight_sum += lt.centerness[i];
            }
        }
        if !level_targets.is_empty() {
            let sum = tape.iou_loss_sum(out.reg, level_targets, lt.shape.stride as f64);
            parts.push((sum, 1.0));
        }
    }
    if parts.is_empty() || weight_sum <= 0.0 {
        return tape.constant(0.0);
    }
    let total = tape.sum_weighted(&parts);
    tape.scale(total, 1.0 / weight_sum)
}

/// Mean binary cross entropy between predicted centerness and its target
/// over positive locations.
pub fn centerness_loss_t(
    tape: &mut Tape,
    outputs: &[LevelOutputVars],
    targets: &TargetAssignment,
) -> Var {
    let mut parts = Vec::new();
    let mut count = 0usize;
    for (out, lt) in outputs.iter().zip(&targets.levels) {
        let pos: Vec<(usize, f64)> = lt
            .class
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= 0)
            .map(|(i, _)| (i, lt.centerness[i]))
            .collect();
        count += pos.len();
        if !pos.is_empty() {
            let sum = tape.bce_sum(out.ctr, pos);
            parts.push((sum, 1.0));
        }
    }
    if parts.is_empty() {
        return tape.constant(0.0);
    }
    let total = tape.sum_weighted(&parts);
    tape.scale(total, 1.0 / count.max(1) as f64)
}

pub fn detection_losses_t(
    tape: &mut Tape,
    outputs: &[LevelOutputVars],
    targets: &TargetAssignment,
    cfg: &HeadConfig,
) -> DetectionLossVars {
    DetectionLossVars {
        cls: focal_cls_loss_t(tape, outputs, targets, cfg),
        reg: iou_reg_loss_t(tape, outputs, targets),
        ctr: centerness_loss_t(tape, outputs, targets),
    }
}

/// Decode raw head outputs into scored detections: per-level score
/// thresholding and top-k, exp-activated distances, box decoding and
/// clipping, cross-level merge, NMS, and a final size cap.
pub fn decode_detections(
    outputs: &HeadOutputs,
    image_w: f64,
    image_h: f64,
    cfg: &HeadConfig,
) -> Vec<Detection> {
    let mut candidates: Vec<Detection> = Vec::new();
    for level in &outputs.levels {
        let shape = level.shape;
        let plane = shape.h * shape.w;
        // (score, class, loc, cls_p, ctr_p)
        let mut level_hits: Vec<(f64, usize, usize, f64, f64)> = Vec::new();
        for loc in 0..plane {
            let ctr_p = crate::tape::sigmoid(level.ctr.data()[loc]);
            for c in 0..cfg.classes {
                let cls_p = crate::tape::sigmoid(level.cls.data()[c * plane + loc]);
                let score = cls_p * ctr_p;
                if score > cfg.score_thresh {
                    level_hits.push((score, c, loc, cls_p, ctr_p));
                }
            }
        }
        level_hits.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.2.cmp(&b.2))
                .then(a.1.cmp(&b.1))
        });
        level_hits.truncate(cfg.pre_nms_topk);

        for (_, class_id, loc, cls_p, ctr_p) in level_hits {
            let (p, q) = (loc % shape.w, loc / shape.w);
            let location = Location::new(p, q, shape.stride).expect("stride >= 1");
            let t = RegressionTarget {
                d_left: level.reg.data()[loc].exp() * shape.stride as f64,
                d_top: level.reg.data()[plane + loc].exp() * shape.stride as f64,
                d_right: level.reg.data()[2 * plane + loc].exp() * shape.stride as f64,
                d_bottom: level.reg.data()[3 * plane + loc].exp() * shape.stride as f64,
            };
            let box_ = geometry::decode_box(&location, &t)
                .expect("exp distances are nonnegative")
                .clip(image_w, image_h);
            candidates.push(Detection::new(box_, class_id, cls_p, ctr_p, shape.level));
        }
    }
    let mut kept = geometry::nms(&candidates, cfg.nms_thresh);
    kept.truncate(cfg.max_dets);
    kept
}

/// Build head outputs that encode a target assignment exactly: positive
/// locations carry saturated class logits, exact centerness logits and
/// log-space distances, so decoding recovers each assigned box.
pub fn synthesize_outputs(targets: &TargetAssignment, classes: usize, logit: f64) -> HeadOutputs {
    let levels = targets
        .levels
        .iter()
        .map(|lt| {
            let plane = lt.shape.h * lt.shape.w;
            let mut cls = Tensor::filled(&[classes, lt.shape.h, lt.shape.w], -logit);
            let mut ctr = Tensor::filled(&[1, lt.shape.h, lt.shape.w], -logit);
            let mut reg = Tensor::zeros(&[4, lt.shape.h, lt.shape.w]);
            for i in 0..plane {
                if lt.class[i] >= 0 {
                    cls.data_mut()[lt.class[i] as usize * plane + i] = logit;
                    let c = lt.centerness[i].clamp(1e-6, 1.0 - 1e-6);
                    ctr.data_mut()[i] = (c / (1.0 - c)).ln();
                    for k in 0..4 {
                        reg.data_mut()[k * plane + i] =
                            (lt.reg[i][k] / lt.shape.stride as f64).ln();
                    }
                }
            }
            LevelOutput {
                cls,
                ctr,
                reg,
                shape: lt.shape,
            }
        })
        .collect();
    HeadOutputs { levels }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxXYXY {
        BoxXYXY::new(x0, y0, x1, y1).unwrap()
    }

    fn single_level(h: usize, w: usize, stride: usize) -> Vec<LevelShape> {
        vec![LevelShape { level: 3, h, w, stride }]
    }

    #[test]
    fn full_coverage_box_makes_every_location_positive() {
        let shapes = single_level(4, 4, 8);
        let gt = vec![(0usize, bx(0.0, 0.0, 32.0, 32.0))];
        let t = assign_targets(&shapes, &gt, &[(0.0, f64::INFINITY)]);
        assert_eq!(t.num_pos, 16);
        assert!(t.levels[0].class.iter().all(|&c| c == 0));
    }

    #[test]
    fn location_outside_all_boxes_is_background() {
        let shapes = single_level(4, 4, 8);
        let gt = vec![(1usize, bx(0.0, 0.0, 9.0, 9.0))];
        let t = assign_targets(&shapes, &gt, &[(0.0, f64::INFINITY)]);
        // Only location (0,0) at (4,4) is inside.
        assert_eq!(t.num_pos, 1);
        assert_eq!(t.levels[0].class[0], 1);
        assert_eq!(t.levels[0].class[1], -1);
    }

    #[test]
    fn empty_gt_is_all_background() {
        let shapes = single_level(4, 4, 8);
        let t = assign_targets(&shapes, &[], &[(0.0, f64::INFINITY)]);
        assert_eq!(t.num_pos, 0);
    }

    #[test]
    fn nested_boxes_resolve_to_smaller_area() {
        let shapes = single_level(8, 8, 8);
        let gt = vec![
            (0usize, bx(0.0, 0.0, 64.0, 64.0)),
            (1usize, bx(24.0, 24.0, 40.0, 40.0)),
        ];
        let t = assign_targets(&shapes, &gt, &[(0.0, f64::INFINITY)]);
        // Exhaustive oracle over every location.
        for q in 0..8 {
            for p in 0..8 {
                let (x, y) = geometry::map_location(p, q, 8).unwrap();
                let inside_small = gt[1].1.contains_strict(x, y);
                let inside_big = gt[0].1.contains_strict(x, y);
                let i = q * 8 + p;
                let want = if inside_small {
                    1
                } else if inside_big {
                    0
                } else {
                    -1
                };
                assert_eq!(t.levels[0].class[i], want, "location ({p},{q})");
                if inside_small {
                    assert_eq!(t.levels[0].gt_index[i], 1);
                }
            }
        }
    }

    #[test]
    fn positive_counts_match_exhaustive_oracle() {
        use rand::RngExt;
        let mut rng = crate::rng::stream(31, "assign_oracle");
        for _ in 0..100 {
            let h = rng.random_range(2..=16);
            let w = rng.random_range(2..=16);
            let shapes = vec![
                LevelShape { level: 3, h, w, stride: 8 },
                LevelShape {
                    level: 4,
                    h: h.div_ceil(2),
                    w: w.div_ceil(2),
                    stride: 16,
                },
            ];
            let ranges = level_ranges(2);
            let n_gt = rng.random_range(0..4);
            let gt: Vec<(usize, BoxXYXY)> = (0..n_gt)
                .map(|_| {
                    let x0 = rng.random_range(0..60) as f64;
                    let y0 = rng.random_range(0..60) as f64;
                    (
                        rng.random_range(0..2),
                        bx(
                            x0,
                            y0,
                            x0 + rng.random_range(4..80) as f64,
                            y0 + rng.random_range(4..80) as f64,
                        ),
                    )
                })
                .collect();
            let t = assign_targets(&shapes, &gt, &ranges);
            let mut want = 0usize;
            for (shape, &(lo, hi)) in shapes.iter().zip(&ranges) {
                for q in 0..shape.h {
                    for p in 0..shape.w {
                        let loc = Location::new(p, q, shape.stride).unwrap();
                        let any = gt.iter().any(|(_, b)| {
                            let tt = geometry::regression_targets(&loc, b);
                            tt.all_positive() && tt.max() >= lo && tt.max() <= hi
                        });
                        if any {
                            want += 1;
                        }
                    }
                }
            }
            assert_eq!(t.num_pos, want);
        }
    }

    #[test]
    fn single_gt_gets_exact_distance_targets() {
        let shapes = single_level(6, 6, 8);
        let b = bx(6.0, 10.0, 41.0, 37.0);
        let t = assign_targets(&shapes, &[(0, b)], &[(0.0, f64::INFINITY)]);
        for q in 0..6 {
            for p in 0..6 {
                let loc = Location::new(p, q, 8).unwrap();
                let i = q * 6 + p;
                if b.contains_strict(loc.x, loc.y) {
                    assert_eq!(
                        t.levels[0].reg[i],
                        [loc.x - b.x0, loc.y - b.y0, b.x1 - loc.x, b.y1 - loc.y]
                    );
                    assert_eq!(
                        t.levels[0].centerness[i],
                        geometry::centerness_target(&geometry::regression_targets(&loc, &b))
                    );
                }
            }
        }
    }

    #[test]
    fn level_ranges_scale_with_level_count() {
        assert_eq!(level_ranges(2), vec![(0.0, 64.0), (64.0, f64::INFINITY)]);
        let five = level_ranges(5);
        assert_eq!(five[0], (0.0, 64.0));
        assert_eq!(five[3], (256.0, 512.0));
        assert_eq!(five[4], (512.0, f64::INFINITY));
    }

    fn default_cfg() -> HeadConfig {
        HeadConfig {
            score_thresh: 0.3,
            ..HeadConfig::default()
        }
    }

    #[test]
    fn decode_of_all_negative_logits_is_empty() {
        let shape = LevelShape { level: 3, h: 4, w: 4, stride: 8 };
        let outputs = HeadOutputs {
            levels: vec![LevelOutput {
                cls: Tensor::filled(&[2, 4, 4], -20.0),
                ctr: Tensor::filled(&[1, 4, 4], -20.0),
                reg: Tensor::zeros(&[4, 4, 4]),
                shape,
            }],
        };
        assert!(decode_detections(&outputs, 32.0, 32.0, &default_cfg()).is_empty());
    }

    #[test]
    fn decode_score_is_product_of_probabilities() {
        let shape = LevelShape { level: 3, h: 1, w: 1, stride: 8 };
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut cls = Tensor::filled(&[2, 1, 1], -20.0);
        cls.data_mut()[0] = logit(0.9);
        let outputs = HeadOutputs {
            levels: vec![LevelOutput {
                cls,
                ctr: Tensor::filled(&[1, 1, 1], logit(0.8)),
                reg: Tensor::zeros(&[4, 1, 1]),
                shape,
            }],
        };
        let dets = decode_detections(&outputs, 64.0, 64.0, &default_cfg());
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.72).abs() < 1e-9);
        assert!((dets[0].cls_score - 0.9).abs() < 1e-9);
        assert!((dets[0].centerness - 0.8).abs() < 1e-9);
    }

    #[test]
    fn synthesized_single_box_decodes_to_gt() {
        let shapes = single_level(8, 8, 8);
        let b = bx(10.0, 14.0, 50.0, 58.0);
        let t = assign_targets(&shapes, &[(1, b)], &[(0.0, f64::INFINITY)]);
        assert!(t.num_pos > 0);
        let outputs = synthesize_outputs(&t, 2, 12.0);
        let dets = decode_detections(&outputs, 64.0, 64.0, &default_cfg());
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        assert!(geometry::iou(&dets[0].box_, &b) > 0.99);
    }

    #[test]
    fn decoded_boxes_stay_inside_image() {
        use rand::RngExt;
        let mut rng = crate::rng::stream(9, "decode_clip");
        let shape = LevelShape { level: 3, h: 4, w: 4, stride: 8 };
        for _ in 0..50 {
            let outputs = HeadOutputs {
                levels: vec![LevelOutput {
                    cls: crate::rng::uniform_tensor(&mut rng, &[2, 4, 4], -2.0, 4.0),
                    ctr: crate::rng::uniform_tensor(&mut rng, &[1, 4, 4], -2.0, 4.0),
                    reg: crate::rng::uniform_tensor(&mut rng, &[4, 4, 4], -2.0, 4.0),
                    shape,
                }],
            };
            for d in decode_detections(&outputs, 32.0, 32.0, &default_cfg()) {
                assert!(d.box_.x0 >= 0.0 && d.box_.y0 >= 0.0);
                assert!(d.box_.x1 <= 32.0 && d.box_.y1 <= 32.0);
            }
        }
    }

    #[test]
    fn nms_survivor_boxes_invariant_under_monotone_centerness_map() {
        // With equal class logits everywhere, any monotone remap of the
        // centerness logits preserves the score ordering, so the surviving
        // box set must not change.
        use rand::RngExt;
        let mut rng = crate::rng::stream(40, "argsort");
        let shape = LevelShape { level: 3, h: 4, w: 4, stride: 8 };
        let cls = Tensor::filled(&[2, 4, 4], 2.0);
        let ctr = crate::rng::uniform_tensor(&mut rng, &[1, 4, 4], 0.5, 3.0);
        let reg = crate::rng::uniform_tensor(&mut rng, &[4, 4, 4], -1.0, 1.5);
        let outputs = HeadOutputs {
            levels: vec![LevelOutput {
                cls: cls.clone(),
                ctr: ctr.clone(),
                reg: reg.clone(),
                shape,
            }],
        };
        let remapped = HeadOutputs {
            levels: vec![LevelOutput {
                cls,
                ctr: ctr.map(|z| z + 1.0),
                reg,
                shape,
            }],
        };
        let cfg = HeadConfig {
            score_thresh: 0.05,
            ..HeadConfig::default()
        };
        let a = decode_detections(&outputs, 32.0, 32.0, &cfg);
        let b = decode_detections(&remapped, 32.0, 32.0, &cfg);
        let boxes = |d: &[Detection]| {
            let mut v: Vec<(String, usize)> = d
                .iter()
                .map(|d| (format!("{:?}", d.box_), d.class_id))
                .collect();
            v.sort();
            v
        };
        assert_eq!(boxes(&a), boxes(&b));
    }
}
