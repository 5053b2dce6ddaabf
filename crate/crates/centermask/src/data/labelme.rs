//! Labelme JSON annotation reading and writing.
//!
//! Only polygon shapes are accepted and labels must match the two class
//! names exactly. The parser fills pixel data with zeros; the dataset
//! loader attaches the actual image afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{class_id_from_label, DatasetRecord, Instance, CLASS_NAMES};

#[derive(Serialize, Deserialize)]
struct LabelmeDoc {
    version: String,
    #[serde(default)]
    flags: serde_json::Map<String, serde_json::Value>,
    shapes: Vec<LabelmeShape>,
    #[serde(rename = "imagePath")]
    image_path: String,
    #[serde(rename = "imageData", default)]
    image_data: Option<String>,
    #[serde(rename = "imageHeight")]
    image_height: usize,
    #[serde(rename = "imageWidth")]
    image_width: usize,
}

#[derive(Serialize, Deserialize)]
struct LabelmeShape {
    label: String,
    points: Vec<[f64; 2]>,
    #[serde(default)]
    group_id: Option<i64>,
    shape_type: String,
    #[serde(default)]
    flags: serde_json::Map<String, serde_json::Value>,
}

/// Parse a Labelme document into a record. The returned record's image is
/// a zero tensor of the annotated size; `image_id` is derived from
/// `imagePath` (file stem).
pub fn parse_labelme(text: &str) -> Result<DatasetRecord> {
    let doc: LabelmeDoc = serde_json::from_str(text).map_err(|e| Error::json(&e))?;
    if doc.image_height == 0 || doc.image_width == 0 {
        return Err(Error::Data("imageHeight/imageWidth must be positive".into()));
    }
    let mut instances = Vec::with_capacity(doc.shapes.len());
    for shape in &doc.shapes {
        if shape.shape_type != "polygon" {
            return Err(Error::Data(format!(
                "unsupported shape_type {:?}; only \"polygon\" is accepted",
                shape.shape_type
            )));
        }
        let class_id = class_id_from_label(&shape.label)?;
        let polygon: Vec<(f64, f64)> = shape.points.iter().map(|p| (p[0], p[1])).collect();
        instances.push(Instance::from_polygon(
            class_id,
            polygon,
            doc.image_height,
            doc.image_width,
        )?);
    }
    let image_id = std::path::Path::new(&doc.image_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| doc.image_path.clone());
    Ok(DatasetRecord {
        image_id,
        image: Tensor::zeros(&[3, doc.image_height, doc.image_width]),
        instances,
    })
}

/// Serialize a record's annotations as a Labelme document.
pub fn write_labelme(record: &DatasetRecord) -> String {
    let doc = LabelmeDoc {
        version: "5.2.1".to_string(),
        flags: serde_json::Map::new(),
        shapes: record
            .instances
            .iter()
            .map(|inst| LabelmeShape {
                label: CLASS_NAMES[inst.class_id].to_string(),
                points: inst.polygon.iter().map(|&(x, y)| [x, y]).collect(),
                group_id: None,
                shape_type: "polygon".to_string(),
                flags: serde_json::Map::new(),
            })
            .collect(),
        image_path: format!("../images/{}.png", record.image_id),
        image_data: None,
        image_height: record.height(),
        image_width: record.width(),
    };
    serde_json::to_string_pretty(&doc).expect("labelme serialization cannot fail")
}
