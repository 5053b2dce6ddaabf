//! Batch inference over dataset records and its file outputs: VOC XML per
//! image, a predictions JSON (with RLE masks) for the evaluator, and
//! overlay PNGs.

use std::path::Path;

use crate::data::{export_voc_xml, DatasetRecord};
use crate::error::{Error, Result};
use crate::eval::{ImagePredictions, PredInstance};
use crate::geometry::Detection;
use crate::model::Model;
use crate::sagmask::MaskInstance;

pub struct InferenceResult {
    pub image_id: String,
    pub image_h: usize,
    pub image_w: usize,
    pub detections: Vec<Detection>,
    pub masks: Vec<MaskInstance>,
}

/// Run the model over every record. Per-image results are independent;
/// detection outputs do not depend on `with_masks`.
pub fn infer(model: &Model, records: &[DatasetRecord], with_masks: bool) -> Result<Vec<InferenceResult>> {
    records
        .iter()
        .map(|r| {
            let out = model.infer_image(&r.image, with_masks)?;
            Ok(InferenceResult {
                image_id: r.image_id.clone(),
                image_h: r.height(),
                image_w: r.width(),
                detections: out.detections,
                masks: out.masks,
            })
        })
        .collect()
}

/// Convert results to the evaluator's prediction records. Detections of
/// the insulator class carry their pasted masks; box-only classes carry
/// none.
pub fn to_predictions(results: &[InferenceResult]) -> Vec<ImagePredictions> {
    results
        .iter()
        .map(|r| {
            let mut masks = r.masks.iter();
            let instances = r
                .detections
                .iter()
                .map(|d| {
                    let mask = if d.class_id == crate::data::CLASS_INSULATOR {
                        masks.next().map(|m| m.binary_mask.clone())
                    } else {
                        None
                    };
                    PredInstance {
                        class_id: d.class_id,
                        score: d.score,
                        box_: d.box_,
                        mask,
                    }
                })
                .collect();
            ImagePredictions {
                image_id: r.image_id.clone(),
                instances,
            }
        })
        .collect()
}

/// Write `xml/<id>.xml` per image and `predictions.json` under `dir`.
pub fn write_outputs(dir: &Path, results: &[InferenceResult]) -> Result<()> {
    let xml_dir = dir.join("xml");
    std::fs::create_dir_all(&xml_dir).map_err(|e| Error::io(&xml_dir, e))?;
    for r in results {
        let xml = export_voc_xml(&r.image_id, &r.detections, (r.image_w, r.image_h));
        crate::io_util::write_atomic(&xml_dir.join(format!("{}.xml", r.image_id)), xml.as_bytes())?;
    }
    crate::eval::save_predictions(&dir.join("predictions.json"), &to_predictions(results))
}

/// Write `overlays/<id>.png` per image under `dir`.
pub fn write_overlays(dir: &Path, results: &[InferenceResult], records: &[DatasetRecord]) -> Result<()> {
    let overlay_dir = dir.join("overlays");
    std::fs::create_dir_all(&overlay_dir).map_err(|e| Error::io(&overlay_dir, e))?;
    for r in results {
        let record = records
            .iter()
            .find(|rec| rec.image_id == r.image_id)
            .ok_or_else(|| Error::Data(format!("no record for {:?}", r.image_id)))?;
        let png = super::overlay::render_overlay(&record.image, &r.detections, &r.masks)?;
        crate::io_util::write_atomic(&overlay_dir.join(format!("{}.png", r.image_id)), &png)?;
    }
    Ok(())
}
