//! Spatial-attention-guided mask branch: scale-adaptive ROI extraction
//! from the pyramid, a sigmoid attention gate built from channel-wise
//! max/mean pooling, mask prediction at 2S x 2S, and pasting predicted
//! masks back into image coordinates.

use crate::backbone::{bind_all, var, BoundVars};
use crate::error::{Error, Result};
use crate::fpn::Pyramid;
use crate::geometry::{BoxXYXY, Detection};
use crate::mask::BinaryMask;
use crate::params::ParamStore;
use crate::tape::{BilinearPoint, RoiSamples, Tape, Var};
use crate::tensor::{FeatureVolume, Tensor};

/// How the max-pooled and mean-pooled maps are combined before the
/// attention convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionCombine {
    /// Channel concatenation (2xHxW into the conv).
    Concat,
    /// Elementwise product (1xHxW into the conv).
    Product,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// ROI pooling size S; mask logits come out at 2S x 2S.
    pub roi_size: usize,
    pub tower_convs: usize,
    pub tower_width: usize,
    pub classes: usize,
    pub combine: AttentionCombine,
    /// Lowest and highest pyramid level the branch may pool from.
    pub min_level: usize,
    pub max_level: usize,
    pub paste_thresh: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            roi_size: 14,
            tower_convs: 2,
            tower_width: 16,
            classes: 2,
            combine: AttentionCombine::Concat,
            min_level: 3,
            max_level: 5,
            paste_thresh: 0.5,
        }
    }
}

/// A fixed-size feature patch pooled from one pyramid level for one box.
#[derive(Clone, Debug)]
pub struct RoiFeature {
    pub box_: BoxXYXY,
    pub level: usize,
    /// `[C, S, S]` pooled values.
    pub data: Tensor,
}

/// One instance's mask prediction pasted to image coordinates.
#[derive(Clone, Debug)]
pub struct MaskInstance {
    pub detection: Detection,
    /// `[classes, 2S, 2S]` raw logits.
    pub mask_logits: Tensor,
    pub binary_mask: BinaryMask,
}

pub fn register_params(store: &mut ParamStore, cfg: &MaskConfig, in_width: usize, seed: u64) {
    let mut c = in_width;
    for j in 0..cfg.tower_convs {
        crate::backbone::register_conv(store, &format!("mask.tower.conv{j}"), cfg.tower_width, c, 3, seed);
        c = cfg.tower_width;
    }
    let attn_in = match cfg.combine {
        AttentionCombine::Concat => 2,
        AttentionCombine::Product => 1,
    };
    crate::backbone::register_conv(store, "mask.attention", 1, attn_in, 3, seed);
    store.register(
        "mask.deconv.weight",
        &[cfg.tower_width, cfg.tower_width, 2, 2],
        crate::params::Init::HeNormal { fan_in: cfg.tower_width * 4 },
        seed,
    );
    store.register("mask.deconv.bias", &[cfg.tower_width], crate::params::Init::Zero, seed);
    crate::backbone::register_conv(store, "mask.predict", cfg.classes, cfg.tower_width, 1, seed);
}

/// Attention map on the tape: channel max and mean, combined, 3x3 conv,
/// sigmoid. Output is `[1, H, W]` with values strictly inside (0, 1).
pub fn spatial_attention_t(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    combine: AttentionCombine,
) -> Var {
    let p_max = tape.channel_max(x);
    let p_avg = tape.channel_mean(x);
    let merged = match combine {
        AttentionCombine::Concat => tape.concat_c(&[p_max, p_avg]),
        AttentionCombine::Product => tape.mul(p_max, p_avg),
    };
    let conv = tape.conv2d(merged, w, b, 1, 1);
    tape.sigmoid(conv)
}

/// Stand-alone attention map over a feature volume.
pub fn spatial_attention(
    x: &FeatureVolume,
    w: &Tensor,
    b: &Tensor,
    combine: AttentionCombine,
) -> Result<FeatureVolume> {
    let expect_in = match combine {
        AttentionCombine::Concat => 2,
        AttentionCombine::Product => 1,
    };
    if w.shape() != [1, expect_in, 3, 3] {
        return Err(Error::Shape(format!(
            "attention conv weight must be [1,{expect_in},3,3], got {:?}",
            w.shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let wv = tape.leaf(w.clone());
    let bv = tape.leaf(b.clone());
    let out = spatial_attention_t(&mut tape, xv, wv, bv, combine);
    FeatureVolume::new(tape.value(out).clone(), x.stride())
}

/// Broadcast elementwise product of an attention map over all channels.
pub fn apply_attention(a: &FeatureVolume, x: &FeatureVolume) -> Result<FeatureVolume> {
    if a.channels() != 1 || a.height() != x.height() || a.width() != x.width() {
        return Err(Error::Shape(format!(
            "attention map {:?} does not match features {:?}",
            a.tensor().shape(),
            x.tensor().shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let av = tape.leaf(a.tensor().clone());
    let out = tape.spatial_gate(xv, av);
    FeatureVolume::new(tape.value(out).clone(), x.stride())
}

/// Scale-adaptive level choice:
/// `clamp(ceil(max_level - log2(image_area / box_area)), min_level, max_level)`.
pub fn roi_level(
    box_area: f64,
    image_area: f64,
    min_level: usize,
    max_level: usize,
) -> Result<usize> {
    if box_area <= 0.0 {
        return Err(Error::InvalidArgument("zero-area box".into()));
    }
    let raw = max_level as f64 - (image_area / box_area).log2();
    let lvl = raw.ceil();
    Ok((lvl.max(min_level as f64).min(max_level as f64)) as usize)
}

/// Bilinear sampling pattern of `s x s` cell centers of `box_` on a
/// feature plane with the given stride and dimensions. Feature coordinates
/// invert the location mapping `(x - floor(r/2)) / r` and clamp to the
/// plane border.
pub fn roi_samples(box_: &BoxXYXY, s: usize, stride: usize, fh: usize, fw: usize) -> RoiSamples {
    let half = (stride / 2) as f64;
    let mut points = Vec::with_capacity(s * s);
    for i in 0..s {
        let y = box_.y0 + (i as f64 + 0.5) * box_.height() / s as f64;
        let v = ((y - half) / stride as f64).clamp(0.0, (fh - 1) as f64);
        let y0 = v.floor() as usize;
        let y1 = (y0 + 1).min(fh - 1);
        let fy = v - y0 as f64;
        for j in 0..s {
            let x = box_.x0 + (j as f64 + 0.5) * box_.width() / s as f64;
            let u = ((x - half) / stride as f64).clamp(0.0, (fw - 1) as f64);
            let x0 = u.floor() as usize;
            let x1 = (x0 + 1).min(fw - 1);
            let fx = u - x0 as f64;
            points.push(BilinearPoint {
                idx: [y0 * fw + x0, y0 * fw + x1, y1 * fw + x0, y1 * fw + x1],
                w: [
                    (1.0 - fx) * (1.0 - fy),
                    fx * (1.0 - fy),
                    (1.0 - fx) * fy,
                    fx * fy,
                ],
            });
        }
    }
    RoiSamples {
        plane_h: fh,
        plane_w: fw,
        out_size: s,
        points,
    }
}

/// Pool an `S x S` feature patch for a box from the pyramid.
pub fn roi_extract(pyramid: &Pyramid, box_: &BoxXYXY, s: usize) -> Result<RoiFeature> {
    let first = pyramid.first_level();
    let top = first + pyramid.levels.len() - 1;
    let p3 = pyramid.level(first);
    let image_area = (p3.height() * p3.stride()) as f64 * (p3.width() * p3.stride()) as f64;
    let level = roi_level(box_.area(), image_area, first, top.min(5))?;
    let fv = pyramid.level(level);
    let samples = roi_samples(box_, s, fv.stride(), fv.height(), fv.width());
    let mut tape = Tape::new();
    let x = tape.leaf(fv.tensor().clone());
    let out = tape.roi_bilinear(x, samples);
    Ok(RoiFeature {
        box_: *box_,
        level,
        data: tape.value(out).clone(),
    })
}

/// Mask head on the tape: tower convs, attention gate, 2x transposed-conv
/// upsample, 1x1 prediction. `roi: [C, S, S]` -> `[classes, 2S, 2S]`.
pub fn mask_head_forward_t(tape: &mut Tape, roi: Var, vars: &BoundVars, cfg: &MaskConfig) -> Var {
    let mut cur = roi;
    for j in 0..cfg.tower_convs {
        let w = var(vars, &format!("mask.tower.conv{j}.weight"));
        let b = var(vars, &format!("mask.tower.conv{j}.bias"));
        let y = tape.conv2d(cur, w, b, 1, 1);
        cur = tape.relu(y);
    }
    let attn = spatial_attention_t(
        tape,
        cur,
        var(vars, "mask.attention.weight"),
        var(vars, "mask.attention.bias"),
        cfg.combine,
    );
    let gated = tape.spatial_gate(cur, attn);
    let up = tape.conv_transpose2(
        gated,
        var(vars, "mask.deconv.weight"),
        var(vars, "mask.deconv.bias"),
    );
    let up = tape.relu(up);
    tape.conv2d(
        up,
        var(vars, "mask.predict.weight"),
        var(vars, "mask.predict.bias"),
        1,
        0,
    )
}

/// Stand-alone mask head over a pooled ROI.
pub fn mask_head_forward(roi: &RoiFeature, store: &ParamStore, cfg: &MaskConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind_all(&mut tape, store);
    let r = tape.leaf(roi.data.clone());
    let out = mask_head_forward_t(&mut tape, r, &vars, cfg);
    Ok(tape.value(out).clone())
}

/// Paste one class plane of mask logits into a zeroed image-sized canvas:
/// bilinear-resample the sigmoid probabilities to the box and threshold.
/// Pixels whose centers fall outside the box stay false.
pub fn paste_mask(
    mask_logits: &Tensor,
    class_id: usize,
    box_: &BoxXYXY,
    image_h: usize,
    image_w: usize,
    thresh: f64,
) -> BinaryMask {
    let m = mask_logits.shape()[1];
    let plane = m * m;
    let probs: Vec<f64> = mask_logits.data()[class_id * plane..(class_id + 1) * plane]
        .iter()
        .map(|&z| crate::tape::sigmoid(z))
        .collect();
    let mut out = BinaryMask::zeros(image_h, image_w);
    if box_.width() <= 0.0 || box_.height() <= 0.0 {
        return out;
    }
    let y_lo = box_.y0.floor().max(0.0) as usize;
    let y_hi = (box_.y1.ceil() as usize).min(image_h);
    let x_lo = box_.x0.floor().max(0.0) as usize;
    let x_hi = (box_.x1.ceil() as usize).min(image_w);
    for py in y_lo..y_hi {
        let cy = py as f64 + 0.5;
        if cy < box_.y0 || cy >= box_.y1 {
            continue;
        }
        let v = ((cy - box_.y0) / box_.height() * m as f64 - 0.5).clamp(0.0, (m - 1) as f64);
        let my0 = v.floor() as usize;
        let my1 = (my0 + 1).min(m - 1);
        let fy = v - my0 as f64;
        for px in x_lo..x_hi {
            let cx = px as f64 + 0.5;
            if cx < box_.x0 || cx >= box_.x1 {
                continue;
            }
            let u = ((cx - box_.x0) / box_.width() * m as f64 - 0.5).clamp(0.0, (m - 1) as f64);
            let mx0 = u.floor() as usize;
            let mx1 = (mx0 + 1).min(m - 1);
            let fx = u - mx0 as f64;
            let p = probs[my0 * m + mx0] * (1.0 - fx) * (1.0 - fy)
                + probs[my0 * m + mx1] * fx * (1.0 - fy)
                + probs[my1 * m + mx0] * (1.0 - fx) * fy
                + probs[my1 * m + mx1] * fx * fy;
            if p >= thresh {
                out.set(py, px, true);
            }
        }
    }
    out
}

/// Box-crop a ground-truth mask and resample it to `m x m` (nearest pixel,
/// sampled at cell centers): the training target for the mask head.
pub fn crop_resize_gt_mask(gt: &BinaryMask, box_: &BoxXYXY, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    if box_.width() <= 0.0 || box_.height() <= 0.0 {
        return out;
    }
    for i in 0..m {
        let y = box_.y0 + (i as f64 + 0.5) * box_.height() / m as f64;
        let py = y.floor();
        if py < 0.0 || py >= gt.h as f64 {
            continue;
        }
        for j in 0..m {
            let x = box_.x0 + (j as f64 + 0.5) * box_.width() / m as f64;
            let px = x.floor();
            if px < 0.0 || px >= gt.w as f64 {
                continue;
            }
            if gt.get(py as usize, px as usize) {
                out[i * m + j] = 1.0;
            }
        }
    }
    out
}
