//! The assembled network: backbone, pyramid, detection head and mask
//! branch behind one parameter store, with graph builders for training
//! and a plain forward path for inference.

use crate::backbone::{self, bind_all, BackboneConfig, BoundVars};
use crate::data::{DatasetRecord, CLASS_INSULATOR};
use crate::error::{Error, Result};
use crate::fcos::{self, HeadConfig, HeadOutputs, LevelOutput, LevelShape};
use crate::fpn::{self, FpnConfig, Pyramid};
use crate::geometry::{BoxXYXY, Detection};
use crate::params::ParamStore;
use crate::sagmask::{self, MaskConfig, MaskInstance, RoiFeature};
use crate::tape::{Tape, Var};
use crate::tensor::{FeatureVolume, Tensor};

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fpn: FpnConfig,
    pub head: HeadConfig,
    pub mask: MaskConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fpn.validate()?;
        self.head.validate()?;
        if self.mask.roi_size == 0 {
            return Err(Error::Config("mask roi_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Highest pyramid level the mask branch may pool from, bounded by the
    /// configured pyramid height.
    pub fn mask_top_level(&self) -> usize {
        self.mask.max_level.min(2 + self.fpn.levels)
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Losses of one training graph, as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub reg: Var,
    pub ctr: Var,
    pub mask: Var,
}

pub struct InferenceOutput {
    pub detections: Vec<Detection>,
    pub masks: Vec<MaskInstance>,
}

impl Model {
    /// Fresh model with seed-driven initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = ParamStore::new();
        backbone::register_params(&mut params, &config.backbone, seed);
        fpn::register_params(&mut params, &config.fpn, &config.backbone.widths, seed);
        fcos::register_params(&mut params, &config.head, config.fpn.width, seed);
        sagmask::register_params(&mut params, &config.mask, config.fpn.width, seed);
        Ok(Model { config, params })
    }

    /// Load a checkpoint, validating it against the configuration's
    /// expected parameter schema.
    pub fn load(config: ModelConfig, path: &std::path::Path) -> Result<Model> {
        let expected = Model::new(config.clone(), 0)?;
        let params = ParamStore::load(path)?;
        params.validate_schema(&expected.params)?;
        Ok(Model { config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path)
    }

    /// Pad an image tensor to multiple-of-32 sides (zeros, bottom/right).
    pub fn pad_image(image: &Tensor) -> Tensor {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let ph = h.div_ceil(32) * 32;
        let pw = w.div_ceil(32) * 32;
        crate::data::augment::pad_to(image, ph, pw)
    }

    /// Bind all parameters onto a tape (one leaf per parameter).
    pub fn bind(&self, tape: &mut Tape) -> BoundVars {
        bind_all(tape, &self.params)
    }

    /// Backbone + pyramid + head graph for one (padded) image using
    /// already-bound parameters.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        vars: &BoundVars,
        image: &Tensor,
    ) -> (Vec<Var>, Vec<fcos::LevelOutputVars>) {
        let img = tape.leaf(image.clone());
        let c345 = backbone::backbone_forward_t(tape, img, vars, &self.config.backbone);
        let pyramid = fpn::fpn_forward_t(tape, c345, vars, &self.config.fpn);
        let heads = fcos::head_forward_t(tape, &pyramid, vars, &self.config.head);
        (pyramid, heads)
    }

    /// Build backbone + pyramid + head graphs on a tape. Returns the bound
    /// parameter vars, the pyramid level vars, and the head output vars.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        image: &Tensor,
    ) -> (BoundVars, Vec<Var>, Vec<fcos::LevelOutputVars>) {
        let vars = self.bind(tape);
        let (pyramid, heads) = self.forward_with(tape, &vars, image);
        (vars, pyramid, heads)
    }

    /// Level geometry of a padded `h x w` image.
    pub fn level_shapes(&self, h: usize, w: usize) -> Vec<LevelShape> {
        self.config
            .fpn
            .level_numbers()
            .iter()
            .map(|&level| {
                let stride = fpn::level_stride(level);
                LevelShape {
                    level,
                    h: h.div_ceil(stride),
                    w: w.div_ceil(stride),
                    stride,
                }
            })
            .collect()
    }

    fn head_outputs_from_tape(
        &self,
        tape: &Tape,
        pyramid: &[Var],
        heads: &[fcos::LevelOutputVars],
    ) -> (Pyramid, HeadOutputs) {
        let mut volumes = Vec::with_capacity(pyramid.len());
        let mut levels = Vec::with_capacity(heads.len());
        for (i, (&p, h)) in pyramid.iter().zip(heads).enumerate() {
            let stride = fpn::level_stride(3 + i);
            let value = tape.value(p).clone();
            let shape = LevelShape {
                level: 3 + i,
                h: value.shape()[1],
                w: value.shape()[2],
                stride,
            };
            volumes.push(FeatureVolume::new(value, stride).expect("valid level"));
            levels.push(LevelOutput {
                cls: tape.value(h.cls).clone(),
                ctr: tape.value(h.ctr).clone(),
                reg: tape.value(h.reg).clone(),
                shape,
            });
        }
        (Pyramid { levels: volumes }, HeadOutputs { levels })
    }

    /// Plain forward pass: pyramid features and raw head outputs for a
    /// (padded) image.
    pub fn forward(&self, image: &Tensor) -> Result<(Pyramid, HeadOutputs)> {
        let padded = Self::pad_image(image);
        let mut tape = Tape::new();
        let (_, pyramid, heads) = self.forward_graph(&mut tape, &padded);
        Ok(self.head_outputs_from_tape(&tape, &pyramid, &heads))
    }

    /// Full inference on one image: decode detections, then (optionally)
    /// run the mask branch on insulator detections. Detections are
    /// identical whether or not masks are computed.
    pub fn infer_image(&self, image: &Tensor, with_masks: bool) -> Result<InferenceOutput> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let (pyramid, outputs) = self.forward(image)?;
        let detections: Vec<Detection> =
            fcos::decode_detections(&outputs, w as f64, h as f64, &self.config.head)
                .into_iter()
                .filter(|d| d.box_.area() > 0.0)
                .collect();
        let mut masks = Vec::new();
        if with_masks {
            for det in detections
                .iter()
                .filter(|d| d.class_id == CLASS_INSULATOR)
            {
                masks.push(self.mask_for_detection(&pyramid, det, h, w)?);
            }
        }
        Ok(InferenceOutput { detections, masks })
    }

    /// Run the mask branch for one detection and paste the result.
    pub fn mask_for_detection(
        &self,
        pyramid: &Pyramid,
        det: &Detection,
        image_h: usize,
        image_w: usize,
    ) -> Result<MaskInstance> {
        let roi = self.extract_roi(pyramid, &det.box_)?;
        let logits = sagmask::mask_head_forward(&roi, &self.params, &self.config.mask)?;
        let binary_mask = sagmask::paste_mask(
            &logits,
            det.class_id,
            &det.box_,
            image_h,
            image_w,
            self.config.mask.paste_thresh,
        );
        Ok(MaskInstance {
            detection: det.clone(),
            mask_logits: logits,
            binary_mask,
        })
    }

    fn extract_roi(&self, pyramid: &Pyramid, box_: &BoxXYXY) -> Result<RoiFeature> {
        let limited = Pyramid {
            levels: pyramid.levels[..(self.mask_top_level_index() + 1).min(pyramid.levels.len())]
                .to_vec(),
        };
        sagmask::roi_extract(&limited, box_, self.config.mask.roi_size)
    }

    fn mask_top_level_index(&self) -> usize {
        self.config.mask_top_level() - 3
    }

    /// Training losses for one record on a tape with pre-bound parameters:
    /// detection losses from target assignment plus the mask loss over
    /// decoded detections matched to ground truth by box IOU.
    pub fn training_losses_with(
        &self,
        tape: &mut Tape,
        vars: &BoundVars,
        record: &DatasetRecord,
        mask_match_iou: f64,
        mask_rois: usize,
    ) -> Result<LossVars> {
        let padded = Self::pad_image(&record.image);
        let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
        let (pyramid, heads) = self.forward_with(tape, vars, &padded);

        let shapes = self.level_shapes(ph, pw);
        let gt: Vec<(usize, BoxXYXY)> = record
            .instances
            .iter()
            .map(|i| (i.class_id, i.box_))
            .collect();
        let ranges = fcos::level_ranges(shapes.len());
        let targets = fcos::assign_targets(&shapes, &gt, &ranges);

        let det_losses = fcos::detection_losses_t(tape, &heads, &targets, &self.config.head);
        let mask_loss = self.mask_loss_graph(
            tape,
            vars,
            &pyramid,
            &heads,
            record,
            mask_match_iou,
            mask_rois,
        )?;
        Ok(LossVars {
            cls: det_losses.cls,
            reg: det_losses.reg,
            ctr: det_losses.ctr,
            mask: mask_loss,
        })
    }

    /// Convenience: bind parameters and build the training graph for one
    /// record.
    pub fn training_graph(
        &self,
        tape: &mut Tape,
        record: &DatasetRecord,
        mask_match_iou: f64,
        mask_rois: usize,
    ) -> Result<(LossVars, BoundVars)> {
        let vars = self.bind(tape);
        let losses = self.training_losses_with(tape, &vars, record, mask_match_iou, mask_rois)?;
        Ok((losses, vars))
    }

    /// Mask loss: decode current detections (no gradient through
    /// decoding), match them to same-class ground truth by box IOU, and
    /// take mean per-pixel BCE of each matched ROI's mask logits against
    /// the box-cropped ground-truth mask. Zero when nothing matches.
    #[allow(clippy::too_many_arguments)]
    fn mask_loss_graph(
        &self,
        tape: &mut Tape,
        vars: &BoundVars,
        pyramid: &[Var],
        heads: &[fcos::LevelOutputVars],
        record: &DatasetRecord,
        match_iou: f64,
        max_rois: usize,
    ) -> Result<Var> {
        let (h, w) = (record.height(), record.width());
        let (volumes, outputs) = self.head_outputs_from_tape(tape, pyramid, heads);
        let detections = fcos::decode_detections(&outputs, w as f64, h as f64, &self.config.head);

        let m = 2 * self.config.mask.roi_size;
        let mut parts: Vec<(Var, f64)> = Vec::new();
        let mut used_per_gt = vec![false; record.instances.len()];
        for det in detections.iter() {
            if parts.len() >= max_rois {
                break;
            }
            if det.box_.area() <= 0.0 {
                continue;
            }
            // Best unmatched same-class GT by box IOU.
            let mut best: Option<(f64, usize)> = None;
            for (gi, inst) in record.instances.iter().enumerate() {
                if inst.class_id != det.class_id || used_per_gt[gi] {
                    continue;
                }
                let v = crate::geometry::iou(&det.box_, &inst.box_);
                if v >= match_iou && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, gi));
                }
            }
            let Some((_, gi)) = best else { continue };
            used_per_gt[gi] = true;

            let level = sagmask::roi_level(
                det.box_.area(),
                (h * w) as f64,
                3,
                self.config.mask_top_level(),
            )?;
            let idx = level - 3;
            let fv = &volumes.levels[idx];
            let samples = sagmask::roi_samples(
                &det.box_,
                self.config.mask.roi_size,
                fv.stride(),
                fv.height(),
                fv.width(),
            );
            let roi = tape.roi_bilinear(pyramid[idx], samples);
            let logits = sagmask::mask_head_forward_t(tape, roi, vars, &self.config.mask);
            let target = sagmask::crop_resize_gt_mask(&record.instances[gi].mask, &det.box_, m);
            let loss = tape.mask_bce_mean(logits, det.class_id, target);
            parts.push((loss, 1.0));
        }
        if parts.is_empty() {
            return Ok(tape.constant(0.0));
        }
        let n = parts.len() as f64;
        let total = tape.sum_weighted(&parts);
        Ok(tape.scale(total, 1.0 / n))
    }
}
