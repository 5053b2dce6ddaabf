//! COCO-style AP/AR evaluation for the two tasks: mask quality of the
//! insulator class ("Value1") and box quality of the defect class
//! ("Value2").
//!
//! Conventions, fixed here and mirrored by the naive reference evaluator
//! in the test tree:
//!
//! - Greedy matching per image: detections in descending score order (ties
//!   by input position), each taking the unmatched ground truth with the
//!   highest IOU >= threshold (ties by lowest GT index). Ground truths
//!   outside the area bucket are "ignored": matching prefers non-ignored
//!   candidates; a detection whose only match is ignored is dropped from
//!   scoring, and unmatched detections are false positives.
//! - Detections beyond `max_dets` per image and class are dropped.
//! - Dataset-level ranking sorts pooled detections by (score desc,
//!   image_id asc, per-image rank asc), so results are independent of
//!   record order.
//! - AP is 101-point interpolated; the "AP"/"AR" rows average the ten IOU
//!   thresholds 0.50:0.05:0.95. A bucket with no ground truth scores the
//!   sentinel -1.
//! - Area buckets test GT area: mask pixel count for the mask task, box
//!   area for the box task. Small < 32^2, medium in [32^2, 96^2],
//!   large > 96^2.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::geometry::{self, BoxXYXY};
use crate::mask::{BinaryMask, Rle};

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaBucket {
    All,
    Small,
    Medium,
    Large,
}

impl AreaBucket {
    pub fn contains(&self, area: f64) -> bool {
        const S: f64 = 32.0 * 32.0;
        const L: f64 = 96.0 * 96.0;
        match self {
            AreaBucket::All => true,
            AreaBucket::Small => area < S,
            AreaBucket::Medium => (S..=L).contains(&area),
            AreaBucket::Large => area > L,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AreaBucket::All => "all",
            AreaBucket::Small => "small",
            AreaBucket::Medium => "medium",
            AreaBucket::Large => "large",
        }
    }
}

/// One evaluation cell: thresholds, GT area bucket, detection cap.
#[derive(Clone, Debug)]
pub struct MetricSpec {
    pub iou_thresholds: Vec<f64>,
    pub area_bucket: AreaBucket,
    pub max_dets: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum Task {
    Mask,
    Box,
}

/// Ground truth of one image, detached from pixel data.
#[derive(Clone, Debug)]
pub struct GtInstance {
    pub class_id: usize,
    pub box_: BoxXYXY,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug)]
pub struct ImageGroundTruth {
    pub image_id: String,
    pub instances: Vec<GtInstance>,
}

impl From<&DatasetRecord> for ImageGroundTruth {
    fn from(r: &DatasetRecord) -> Self {
        ImageGroundTruth {
            image_id: r.image_id.clone(),
            instances: r
                .instances
                .iter()
                .map(|i| GtInstance {
                    class_id: i.class_id,
                    box_: i.box_,
                    mask: i.mask.clone(),
                })
                .collect(),
        }
    }
}

/// One predicted instance; `mask` is required for the mask task (a
/// missing mask never matches and scores as a false positive there).
#[derive(Clone, Debug)]
pub struct PredInstance {
    pub class_id: usize,
    pub score: f64,
    pub box_: BoxXYXY,
    pub mask: Option<BinaryMask>,
}

#[derive(Clone, Debug)]
pub struct ImagePredictions {
    pub image_id: String,
    pub instances: Vec<PredInstance>,
}

/// Pixel IOU of two equally sized masks; 0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::Shape(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.data.iter().zip(&b.data) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetFlag {
    Tp,
    Fp,
    /// Matched only an out-of-bucket GT, or past the detection cap;
    /// excluded from precision/recall.
    Ignored,
}

#[derive(Clone, Debug)]
pub struct MatchResult {
    pub det_flags: Vec<DetFlag>,
    /// Matched flags for non-ignored GTs (ignored GTs stay false).
    pub gt_matched: Vec<bool>,
}

/// Greedy matcher over a precomputed IOU matrix `iou[det][gt]`, with
/// detections already in descending score order.
pub fn match_detections(
    iou: &[Vec<f64>],
    gt_ignore: &[bool],
    iou_thresh: f64,
    max_dets: usize,
) -> MatchResult {
    let n_gt = gt_ignore.len();
    let mut gt_taken = vec![false; n_gt];
    let mut gt_matched = vec![false; n_gt];
    let mut det_flags = Vec::with_capacity(iou.len());
    for (d, row) in iou.iter().enumerate() {
        if d >= max_dets {
            det_flags.push(DetFlag::Ignored);
            continue;
        }
        let mut best: Option<(bool, f64, usize)> = None; // (is_real, iou, gt)
        for g in 0..n_gt {
            if gt_taken[g] || row[g] < iou_thresh {
                continue;
            }
            let real = !gt_ignore[g];
            let better = match best {
                None => true,
                Some((best_real, best_iou, _)) => {
                    (real && !best_real) || (real == best_real && row[g] > best_iou)
                }
            };
            if better {
                best = Some((real, row[g], g));
            }
        }
        match best {
            Some((true, _, g)) => {
                gt_taken[g] = true;
                gt_matched[g] = true;
                det_flags.push(DetFlag::Tp);
            }
            Some((false, _, g)) => {
                gt_taken[g] = true;
                det_flags.push(DetFlag::Ignored);
            }
            None => det_flags.push(DetFlag::Fp),
        }
    }
    MatchResult {
        det_flags,
        gt_matched,
    }
}

/// 101-point interpolated average precision from TP/FP flags in score
/// order. Returns the sentinel -1 when there is no ground truth.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return -1.0;
    }
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Interpolated precision: max precision at recall >= r.
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let mut best = 0.0f64;
        for i in 0..recalls.len() {
            if recalls[i] >= r - 1e-12 {
                best = best.max(precisions[i]);
            }
        }
        total += best;
    }
    total / 101.0
}

/// Mean recall over IOU thresholds: `matched[i] / n_gt` averaged.
/// Sentinel -1 when there is no ground truth.
pub fn average_recall(matched_per_threshold: &[usize], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return -1.0;
    }
    let sum: f64 = matched_per_threshold
        .iter()
        .map(|&m| m as f64 / n_gt as f64)
        .sum();
    sum / matched_per_threshold.len() as f64
}

#[derive(Clone, Debug)]
pub struct MetricRow {
    pub name: &'static str,
    pub iou_label: &'static str,
    pub area: &'static str,
    pub max_dets: usize,
    /// Value1: mask task, insulator class.
    pub mask_value: f64,
    /// Value2: box task, defect class.
    pub box_value: f64,
}

#[derive(Clone, Debug)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        self.rows
            .iter()
            .find(|r| r.name == name)
            .map(|r| (r.mask_value, r.box_value))
    }

    /// Aligned text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:<10} {:<8} {:>7} {:>8} {:>8}\n",
            "Method", "IOU", "Area", "MaxDets", "Value1", "Value2"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:<10} {:<8} {:>7} {:>8.3} {:>8.3}\n",
                r.name, r.iou_label, r.area, r.max_dets, r.mask_value, r.box_value
            ));
        }
        out
    }

    /// Machine-readable `name.task=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!("{}.mask={:.6}\n", r.name, r.mask_value));
            out.push_str(&format!("{}.box={:.6}\n", r.name, r.box_value));
        }
        out
    }
}

impl std::fmt::Display for MetricTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Per-image, per-task data prepared once and reused across cells.
struct TaskImage {
    /// Detections sorted by (score desc, input index asc), with IOU rows.
    scores: Vec<f64>,
    iou: Vec<Vec<f64>>,
    gt_areas: Vec<f64>,
}

fn prepare_task(
    gts: &BTreeMap<&str, &ImageGroundTruth>,
    preds: &BTreeMap<&str, &ImagePredictions>,
    class_id: usize,
    task: Task,
) -> Result<Vec<(String, TaskImage)>> {
    let mut out = Vec::new();
    for (&id, gt) in gts {
        let gt_instances: Vec<&GtInstance> = gt
            .instances
            .iter()
            .filter(|i| i.class_id == class_id)
            .collect();
        let mut dets: Vec<&PredInstance> = preds
            .get(id)
            .map(|p| {
                p.instances
                    .iter()
                    .filter(|i| i.class_id == class_id)
                    .collect()
            })
            .unwrap_or_default();
        // Stable sort keeps input order among ties.
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));

        let mut iou = Vec::with_capacity(dets.len());
        for d in &dets {
            let mut row = Vec::with_capacity(gt_instances.len());
            for g in &gt_instances {
                let v = match task {
                    Task::Box => geometry::iou(&d.box_, &g.box_),
                    Task::Mask => match &d.mask {
                        Some(m) => mask_iou(m, &g.mask)?,
                        None => 0.0,
                    },
                };
                row.push(v);
            }
            iou.push(row);
        }
        let gt_areas = gt_instances
            .iter()
            .map(|g| match task {
                Task::Box => g.box_.area(),
                Task::Mask => g.mask.count() as f64,
            })
            .collect();
        out.push((
            id.to_string(),
            TaskImage {
                scores: dets.iter().map(|d| d.score).collect(),
                iou,
                gt_areas,
            },
        ));
    }
    Ok(out)
}

struct CellResult {
    per_thresh_ap: Vec<f64>,
    per_thresh_matched: Vec<usize>,
    n_gt: usize,
}

fn evaluate_cell(images: &[(String, TaskImage)], bucket: AreaBucket, max_dets: usize) -> CellResult {
    let mut n_gt = 0usize;
    for (_, img) in images {
        n_gt += img.gt_areas.iter().filter(|&&a| bucket.contains(a)).count();
    }
    let mut per_thresh_ap = Vec::with_capacity(IOU_THRESHOLDS.len());
    let mut per_thresh_matched = Vec::with_capacity(IOU_THRESHOLDS.len());
    for &thresh in &IOU_THRESHOLDS {
        // (score, image_id, rank, tp)
        let mut pooled: Vec<(f64, &str, usize, bool)> = Vec::new();
        let mut matched = 0usize;
        for (id, img) in images {
            let gt_ignore: Vec<bool> = img.gt_areas.iter().map(|&a| !bucket.contains(a)).collect();
            let m = match_detections(&img.iou, &gt_ignore, thresh, max_dets);
            matched += m.gt_matched.iter().filter(|&&x| x).count();
            for (rank, flag) in m.det_flags.iter().enumerate() {
                match flag {
                    DetFlag::Tp => pooled.push((img.scores[rank], id, rank, true)),
                    DetFlag::Fp => pooled.push((img.scores[rank], id, rank, false)),
                    DetFlag::Ignored => {}
                }
            }
        }
        pooled.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.cmp(b.1))
                .then(a.2.cmp(&b.2))
        });
        let flags: Vec<bool> = pooled.iter().map(|p| p.3).collect();
        per_thresh_ap.push(average_precision(&flags, n_gt));
        per_thresh_matched.push(matched);
    }
    CellResult {
        per_thresh_ap,
        per_thresh_matched,
        n_gt,
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Compute the full 12-row metric grid for both tasks.
///
/// Every prediction image id must exist in the ground truth; ground-truth
/// images without predictions count as images with zero detections.
pub fn metric_table(preds: &[ImagePredictions], gt: &[ImageGroundTruth]) -> Result<MetricTable> {
    let gt_map: BTreeMap<&str, &ImageGroundTruth> =
        gt.iter().map(|g| (g.image_id.as_str(), g)).collect();
    let mut pred_map: BTreeMap<&str, &ImagePredictions> = BTreeMap::new();
    for p in preds {
        if !gt_map.contains_key(p.image_id.as_str()) {
            return Err(Error::Data(format!(
                "predictions for unknown image {:?}",
                p.image_id
            )));
        }
        if pred_map.insert(p.image_id.as_str(), p).is_some() {
            return Err(Error::Data(format!(
                "duplicate predictions for image {:?}",
                p.image_id
            )));
        }
    }

    let tasks = [
        prepare_task(&gt_map, &pred_map, crate::data::CLASS_INSULATOR, Task::Mask)?,
        prepare_task(&gt_map, &pred_map, crate::data::CLASS_DEFECT, Task::Box)?,
    ];

    // Cells needed by the grid, per task.
    let buckets = [
        (AreaBucket::All, 100usize),
        (AreaBucket::Small, 100),
        (AreaBucket::Medium, 100),
        (AreaBucket::Large, 100),
        (AreaBucket::All, 1),
        (AreaBucket::All, 10),
    ];
    let cells: Vec<Vec<CellResult>> = tasks
        .iter()
        .map(|images| {
            buckets
                .iter()
                .map(|&(b, m)| evaluate_cell(images, b, m))
                .collect()
        })
        .collect();

    let ap_mean = |cell: &CellResult| {
        if cell.n_gt == 0 {
            -1.0
        } else {
            mean(&cell.per_thresh_ap)
        }
    };
    let ap_at = |cell: &CellResult, thresh: f64| {
        if cell.n_gt == 0 {
            -1.0
        } else {
            let idx = IOU_THRESHOLDS
                .iter()
                .position(|&t| (t - thresh).abs() < 1e-9)
                .expect("threshold in grid");
            cell.per_thresh_ap[idx]
        }
    };
    let ar = |cell: &CellResult| average_recall(&cell.per_thresh_matched, cell.n_gt);

    let spec: [(&'static str, &'static str, usize, &dyn Fn(&CellResult) -> f64); 12] = [
        ("AP", "0.50:0.95", 0, &ap_mean),
        ("AP50", "0.50", 0, &|c: &CellResult| ap_at(c, 0.50)),
        ("AP75", "0.75", 0, &|c: &CellResult| ap_at(c, 0.75)),
        ("AP_s", "0.50:0.95", 1, &ap_mean),
        ("AP_m", "0.50:0.95", 2, &ap_mean),
        ("AP_l", "0.50:0.95", 3, &ap_mean),
        ("AR_m1", "0.50:0.95", 4, &ar),
        ("AR_m10", "0.50:0.95", 5, &ar),
        ("AR_m100", "0.50:0.95", 0, &ar),
        ("AR_s", "0.50:0.95", 1, &ar),
        ("AR_m", "0.50:0.95", 2, &ar),
        ("AR_l", "0.50:0.95", 3, &ar),
    ];

    let rows = spec
        .iter()
        .map(|(name, iou_label, cell_idx, f)| {
            let (bucket, max_dets) = buckets[*cell_idx];
            MetricRow {
                name,
                iou_label,
                area: bucket.label(),
                max_dets,
                mask_value: f(&cells[0][*cell_idx]),
                box_value: f(&cells[1][*cell_idx]),
            }
        })
        .collect();
    Ok(MetricTable { rows })
}

// Predictions file: a JSON array of per-image records with RLE masks.

#[derive(Serialize, Deserialize)]
struct PredInstanceFile {
    class_id: usize,
    score: f64,
    #[serde(rename = "box")]
    box_: [f64; 4],
    mask: Option<Rle>,
}

#[derive(Serialize, Deserialize)]
struct ImagePredFile {
    image_id: String,
    instances: Vec<PredInstanceFile>,
}

pub fn save_predictions(path: &Path, preds: &[ImagePredictions]) -> Result<()> {
    let records: Vec<ImagePredFile> = preds
        .iter()
        .map(|p| ImagePredFile {
            image_id: p.image_id.clone(),
            instances: p
                .instances
                .iter()
                .map(|i| PredInstanceFile {
                    class_id: i.class_id,
                    score: i.score,
                    box_: [i.box_.x0, i.box_.y0, i.box_.x1, i.box_.y1],
                    mask: i.mask.as_ref().map(Rle::encode),
                })
                .collect(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&records).expect("serialization cannot fail");
    crate::io_util::write_atomic(path, json.as_bytes())
}

pub fn load_predictions(path: &Path) -> Result<Vec<ImagePredictions>> {
    let text = crate::io_util::read_to_string(path)?;
    let records: Vec<ImagePredFile> = serde_json::from_str(&text).map_err(|e| Error::json(&e))?;
    records
        .into_iter()
        .map(|r| {
            let instances = r
                .instances
                .into_iter()
                .map(|i| {
                    Ok(PredInstance {
                        class_id: i.class_id,
                        score: i.score,
                        box_: BoxXYXY::new(i.box_[0], i.box_[1], i.box_[2], i.box_[3])?,
                        mask: i.mask.map(|m| m.decode()).transpose()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ImagePredictions {
                image_id: r.image_id,
                instances,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let mut m = BinaryMask::zeros(h, w);
        for (y, row) in rows.iter().enumerate() {
            for (x, c) in row.chars().enumerate() {
                if c == '#' {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    #[test]
    fn mask_iou_examples() {
        let a = mask_from(&["###", "...", "..."]);
        let b = mask_from(&["#..", "#..", "#.."]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let disjoint = mask_from(&["...", ".##", ".##"]);
        assert_eq!(mask_iou(&a, &disjoint).unwrap(), 0.0);
        assert!((mask_iou(&a, &b).unwrap() - 0.2).abs() < 1e-12);
        let empty = BinaryMask::zeros(3, 3);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::zeros(2, 3)).is_err());
    }

    #[test]
    fn match_single_pair() {
        let m = match_detections(&[vec![0.9]], &[false], 0.5, 100);
        assert_eq!(m.det_flags, vec![DetFlag::Tp]);
        assert_eq!(m.gt_matched, vec![true]);
    }

    #[test]
    fn double_detection_second_is_fp() {
        let m = match_detections(&[vec![0.9], vec![0.85]], &[false], 0.5, 100);
        assert_eq!(m.det_flags, vec![DetFlag::Tp, DetFlag::Fp]);
    }

    #[test]
    fn matcher_agrees_with_naive_oracle() {
        use rand::RngExt;
        let mut rng = crate::rng::stream(61, "match_oracle");
        for _ in 0..500 {
            let nd = rng.random_range(0..=5);
            let ng = rng.random_range(0..=3);
            let iou: Vec<Vec<f64>> = (0..nd)
                .map(|_| (0..ng).map(|_| rng.random_range(0..100) as f64 / 100.0).collect())
                .collect();
            let got = match_detections(&iou, &vec![false; ng], 0.5, 100);

            // Naive restatement of the documented rule.
            let mut taken = vec![false; ng];
            let mut flags = Vec::new();
            for row in &iou {
                let mut best_g = None;
                let mut best_v = -1.0;
                for g in 0..ng {
                    if !taken[g] && row[g] >= 0.5 && row[g] > best_v {
                        best_v = row[g];
                        best_g = Some(g);
                    }
                }
                match best_g {
                    Some(g) => {
                        taken[g] = true;
                        flags.push(DetFlag::Tp);
                    }
                    None => flags.push(DetFlag::Fp),
                }
            }
            assert_eq!(got.det_flags, flags);
        }
    }

    #[test]
    fn ap_examples() {
        // All GTs found before any FP.
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        // Zero detections.
        assert_eq!(average_precision(&[], 2), 0.0);
        // No ground truth: sentinel.
        assert_eq!(average_precision(&[true], 0), -1.0);
        // (TP, FP, TP) with 2 GTs: 51 points at precision 1, 50 at 2/3.
        let got = average_precision(&[true, false, true], 2);
        let want = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 0.83498).abs() < 1e-5);
    }

    #[test]
    fn ap_matches_brute_force_pr_curve_oracle() {
        use rand::RngExt;
        let mut rng = crate::rng::stream(62, "ap_oracle");
        for _ in 0..200 {
            let n = rng.random_range(1..=12);
            let n_gt = rng.random_range(1..=6);
            let flags: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 1).collect();
            let capped: Vec<bool> = {
                // At most n_gt TPs can exist.
                let mut tp = 0;
                flags
                    .iter()
                    .map(|&f| {
                        if f && tp < n_gt {
                            tp += 1;
                            true
                        } else {
                            false
                        }
                    })
                    .collect()
            };
            let got = average_precision(&capped, n_gt);
            // Oracle: explicit PR points, then interpolation per grid point.
            let mut pr: Vec<(f64, f64)> = Vec::new();
            let mut tp = 0usize;
            for (i, &f) in capped.iter().enumerate() {
                if f {
                    tp += 1;
                }
                pr.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
            }
            let mut acc = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                let best = pr
                    .iter()
                    .filter(|(rec, _)| *rec >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0f64, f64::max);
                acc += best;
            }
            let want = acc / 101.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ar_examples() {
        assert_eq!(average_recall(&[2, 2, 2], 2), 1.0);
        assert_eq!(average_recall(&[1, 1], 2), 0.5);
        assert_eq!(average_recall(&[1], 0), -1.0);
        // Monotonicity in max_dets is a property of matched counts.
        let ar1 = average_recall(&[1, 1, 0], 2);
        let ar10 = average_recall(&[2, 1, 1], 2);
        assert!(ar10 >= ar1);
    }

    fn gt_scene() -> Vec<ImageGroundTruth> {
        let records = crate::data::synth_generate(5, 4, (96, 96)).unwrap();
        records.iter().map(ImageGroundTruth::from).collect()
    }

    fn perfect_predictions(gt: &[ImageGroundTruth]) -> Vec<ImagePredictions> {
        gt.iter()
            .map(|g| ImagePredictions {
                image_id: g.image_id.clone(),
                instances: g
                    .instances
                    .iter()
                    .map(|i| PredInstance {
                        class_id: i.class_id,
                        score: 0.9,
                        box_: i.box_,
                        mask: Some(i.mask.clone()),
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one_everywhere_with_gt() {
        let gt = gt_scene();
        let preds = perfect_predictions(&gt);
        let table = metric_table(&preds, &gt).unwrap();
        for row in &table.rows {
            for v in [row.mask_value, row.box_value] {
                assert!(
                    v == -1.0 || (v - 1.0).abs() < 1e-9 || row.name == "AR_m1",
                    "{}: {v}",
                    row.name
                );
            }
            // AR_m1 can be below 1 when an image has several instances.
            if row.name == "AR_m1" {
                assert!(row.mask_value <= 1.0);
            }
        }
        assert_eq!(table.get("AP50").map(|(m, _)| m), Some(1.0));
    }

    #[test]
    fn empty_predictions_score_zero_ap() {
        let gt = gt_scene();
        let table = metric_table(&[], &gt).unwrap();
        for name in ["AP", "AP50", "AP75"] {
            let (m, b) = table.get(name).unwrap();
            assert_eq!(m, 0.0);
            assert_eq!(b, 0.0);
        }
    }

    #[test]
    fn table_is_independent_of_record_order() {
        let gt = gt_scene();
        let preds = perfect_predictions(&gt);
        let a = metric_table(&preds, &gt).unwrap();
        let mut gt_rev = gt.clone();
        gt_rev.reverse();
        let mut preds_rev = preds.clone();
        preds_rev.reverse();
        let b = metric_table(&preds_rev, &gt_rev).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.mask_value, rb.mask_value);
            assert_eq!(ra.box_value, rb.box_value);
        }
    }

    #[test]
    fn scores_matter_only_through_rank() {
        let gt = gt_scene();
        let mut preds = perfect_predictions(&gt);
        // Perturb scores with a strictly monotone map.
        for p in &mut preds {
            for (k, i) in p.instances.iter_mut().enumerate() {
                i.score = 0.9 - 0.001 * k as f64;
            }
        }
        let a = metric_table(&preds, &gt).unwrap();
        for p in &mut preds {
            for i in &mut p.instances {
                i.score = i.score * 0.5 + 0.1;
            }
        }
        let b = metric_table(&preds, &gt).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.mask_value, rb.mask_value);
            assert_eq!(ra.box_value, rb.box_value);
        }
    }

    #[test]
    fn missing_bucket_yields_sentinel() {
        // Single large GT box: the small bucket has no ground truth.
        let gt = vec![ImageGroundTruth {
            image_id: "a".into(),
            instances: vec![GtInstance {
                class_id: crate::data::CLASS_DEFECT,
                box_: BoxXYXY::new(0.0, 0.0, 90.0, 90.0).unwrap(),
                mask: BinaryMask::zeros(96, 96),
            }],
        }];
        let table = metric_table(&[], &gt).unwrap();
        let (m, b) = table.get("AP_s").unwrap();
        assert_eq!(m, -1.0); // no insulator GT at all
        assert_eq!(b, -1.0); // defect GT exists but not in the small bucket
        // The 90x90 box (area 8100) lands in the medium bucket, which has
        // GT but no detections; large stays at the sentinel.
        let (_, b_medium) = table.get("AP_m").unwrap();
        assert_eq!(b_medium, 0.0);
        let (_, b_large) = table.get("AP_l").unwrap();
        assert_eq!(b_large, -1.0);
    }

    #[test]
    fn unknown_prediction_image_is_rejected() {
        let gt = gt_scene();
        let preds = vec![ImagePredictions {
            image_id: "nope".into(),
            instances: vec![],
        }];
        assert!(metric_table(&preds, &gt).is_err());
    }
}
