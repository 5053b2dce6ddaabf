//! Multi-scale training augmentation: resize the short side to a random
//! draw inside the configured range, cap the long side, and pad to
//! multiple-of-32 sides.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{DatasetRecord, Instance};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Short-side bounds in pixels.
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_long_side: usize,
    pub seed: u64,
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.scale_max <= self.max_long_side as f64)
        {
            return Err(Error::Config(format!(
                "require 0 < scale_min <= scale_max <= max_long_side, got {} / {} / {}",
                self.scale_min, self.scale_max, self.max_long_side
            )));
        }
        Ok(())
    }
}

fn pad32(n: usize) -> usize {
    n.div_ceil(32) * 32
}

/// Bilinear resize of an `[C, H, W]` tensor (half-pixel centers, clamped).
pub fn resize_bilinear(t: &Tensor, nh: usize, nw: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Tensor::zeros(&[c, nh, nw]);
    for y in 0..nh {
        let sy = ((y as f64 + 0.5) * h as f64 / nh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..nw {
            let sx = ((x as f64 + 0.5) * w as f64 / nw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ci in 0..c {
                let v = t.at3(ci, y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + t.at3(ci, y0, x1) * fx * (1.0 - fy)
                    + t.at3(ci, y1, x0) * (1.0 - fx) * fy
                    + t.at3(ci, y1, x1) * fx * fy;
                let i = out.idx3(ci, y, x);
                out.data_mut()[i] = v;
            }
        }
    }
    out
}

/// Zero-pad an `[C, H, W]` tensor on the bottom/right to `nh x nw`.
pub fn pad_to(t: &Tensor, nh: usize, nw: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert!(nh >= h && nw >= w);
    if nh == h && nw == w {
        return t.clone();
    }
    let mut out = Tensor::zeros(&[c, nh, nw]);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = out.idx3(ci, y, x);
                out.data_mut()[i] = t.at3(ci, y, x);
            }
        }
    }
    out
}

/// Resize a record so its short side equals a uniform draw in
/// `[scale_min, scale_max]` (`draw` in `[0, 1)` picks the point), capping
/// the long side at `max_long_side` while preserving aspect, then pad to
/// multiple-of-32 sides with zeros. Polygons scale with the image; boxes
/// and masks are rebuilt from the scaled polygons.
pub fn multi_scale_resize(
    record: &DatasetRecord,
    cfg: &AugmentationConfig,
    draw: f64,
) -> Result<DatasetRecord> {
    cfg.validate()?;
    let (h, w) = (record.height() as f64, record.width() as f64);
    let short = h.min(w);
    let long = h.max(w);
    let target_short = cfg.scale_min + draw * (cfg.scale_max - cfg.scale_min);
    let mut scale = target_short / short;
    if long * scale > cfg.max_long_side as f64 {
        scale = cfg.max_long_side as f64 / long;
    }
    let nh = ((h * scale).round() as usize).max(1);
    let nw = ((w * scale).round() as usize).max(1);
    let (fy, fx) = (nh as f64 / h, nw as f64 / w);

    let resized = resize_bilinear(&record.image, nh, nw);
    let (ph, pw) = (pad32(nh), pad32(nw));
    let image = pad_to(&resized, ph, pw);

    let mut instances = Vec::with_capacity(record.instances.len());
    for inst in &record.instances {
        let polygon: Vec<(f64, f64)> = inst
            .polygon
            .iter()
            .map(|&(x, y)| (x * fx, y * fy))
            .collect();
        instances.push(Instance::from_polygon(inst.class_id, polygon, ph, pw)?);
    }
    Ok(DatasetRecord {
        image_id: record.image_id.clone(),
        image,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::polygon_to_mask;
    use crate::mask::BinaryMask;

    fn record_with_polygon(poly: Vec<(f64, f64)>, h: usize, w: usize) -> DatasetRecord {
        DatasetRecord {
            image_id: "t".into(),
            image: Tensor::filled(&[3, h, w], 0.5),
            instances: vec![Instance::from_polygon(0, poly, h, w).unwrap()],
        }
    }

    #[test]
    fn identity_scale_only_pads() {
        let rec = record_with_polygon(vec![(4.0, 4.0), (20.0, 4.0), (20.0, 28.0), (4.0, 28.0)], 40, 50);
        let cfg = AugmentationConfig {
            scale_min: 40.0,
            scale_max: 40.0,
            max_long_side: 200,
            seed: 0,
        };
        let out = multi_scale_resize(&rec, &cfg, 0.37).unwrap();
        assert_eq!(out.image.shape(), &[3, 64, 64]);
        // Geometry unchanged up to padding.
        assert_eq!(out.instances[0].box_, rec.instances[0].box_);
        assert_eq!(out.instances[0].polygon, rec.instances[0].polygon);
    }

    #[test]
    fn box_corners_scale_with_image() {
        let rec = record_with_polygon(vec![(10.0, 8.0), (30.0, 8.0), (30.0, 24.0), (10.0, 24.0)], 32, 64);
        let cfg = AugmentationConfig {
            scale_min: 64.0,
            scale_max: 64.0,
            max_long_side: 256,
            seed: 0,
        };
        let out = multi_scale_resize(&rec, &cfg, 0.0).unwrap();
        // Short side 32 -> 64, long 64 -> 128: exact doubling.
        assert_eq!(out.image.shape(), &[3, 64, 128]);
        let b = out.instances[0].box_;
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (20.0, 16.0, 60.0, 48.0));
    }

    #[test]
    fn long_side_cap_preserves_aspect() {
        let rec = record_with_polygon(vec![(1.0, 1.0), (5.0, 1.0), (3.0, 5.0)], 32, 128);
        let cfg = AugmentationConfig {
            scale_min: 64.0,
            scale_max: 64.0,
            max_long_side: 160,
            seed: 0,
        };
        let out = multi_scale_resize(&rec, &cfg, 0.0).unwrap();
        // Uncapped would be 64 x 256; cap scales by 160/128 instead.
        assert_eq!(out.image.shape()[2], 160);
        assert_eq!(out.image.shape()[1], 64); // 40 padded to 64
    }

    #[test]
    fn rasterize_then_scale_agrees_with_scale_then_rasterize() {
        use rand::RngExt;
        let mut rng = crate::rng::stream(55, "aug_dual");
        for _ in 0..20 {
            // Convex polygon (rectangle with jittered corners) >= 20 px.
            let x0 = rng.random_range(5..15) as f64;
            let y0 = rng.random_range(5..15) as f64;
            let w = rng.random_range(20..40) as f64;
            let h = rng.random_range(20..40) as f64;
            let poly = vec![(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h)];
            let rec = record_with_polygon(poly.clone(), 64, 64);
            let cfg = AugmentationConfig {
                scale_min: 32.0,
                scale_max: 128.0,
                max_long_side: 128,
                seed: 0,
            };
            let draw = rng.random::<f64>();
            let out = multi_scale_resize(&rec, &cfg, draw).unwrap();
            let (ph, pw) = (out.image.shape()[1], out.image.shape()[2]);
            let scaled_then_rasterized = &out.instances[0].mask;

            // Path B: rasterize at original size, scale the mask by
            // nearest neighbor.
            let orig = polygon_to_mask(&poly, 64, 64).unwrap();
            let f = out.instances[0].polygon[1].0 / poly[1].0;
            let mut nearest = BinaryMask::zeros(ph, pw);
            for y in 0..ph {
                for x in 0..pw {
                    let sy = ((y as f64 + 0.5) / f - 0.5).round();
                    let sx = ((x as f64 + 0.5) / f - 0.5).round();
                    if sy >= 0.0 && sx >= 0.0 && (sy as usize) < 64 && (sx as usize) < 64 {
                        nearest.set(y, x, orig.get(sy as usize, sx as usize));
                    }
                }
            }
            let inter = scaled_then_rasterized
                .data
                .iter()
                .zip(&nearest.data)
                .filter(|(a, b)| **a && **b)
                .count();
            let union = scaled_then_rasterized
                .data
                .iter()
                .zip(&nearest.data)
                .filter(|(a, b)| **a || **b)
                .count();
            assert!(union > 0);
            let iou = inter as f64 / union as f64;
            assert!(iou >= 0.9, "dual-path mask IOU {iou} below 0.9");
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = AugmentationConfig {
            scale_min: 100.0,
            scale_max: 50.0,
            max_long_side: 200,
            seed: 0,
        };
        assert!(cfg.validate().is_err());
    }
}
