//! Pascal-VOC-style XML export of detections and its parsing inverse.
//!
//! ```text
//! <annotation>
//!   <filename>{image_id}.png</filename>
//!   <size><width/><height/><depth/></size>
//!   <object>
//!     <name>Insulator error</name>
//!     <score>0.875</score>
//!     <bndbox><xmin/><ymin/><xmax/><ymax/></bndbox>
//!   </object>*
//! </annotation>
//! ```
//!
//! Box corners are integers: floor for xmin/ymin, ceil for xmax/ymax.
//! Field order is fixed so export is byte-deterministic. The parser
//! accepts arbitrary whitespace/indentation and treats a missing
//! `<score>` as 1.0 (plain VOC ground-truth files carry none).

use quick_xml::events::Event;
use quick_xml::Reader;

use crate::error::{Error, Result};
use crate::geometry::{BoxXYXY, Detection};

use super::{class_id_from_label, CLASS_NAMES};

/// Serialize detections for one image.
pub fn export_voc_xml(image_id: &str, detections: &[Detection], image_size: (usize, usize)) -> String {
    let (w, h) = image_size;
    let mut out = String::new();
    out.push_str("<annotation>\n");
    out.push_str(&format!("  <filename>{image_id}.png</filename>\n"));
    out.push_str("  <size>\n");
    out.push_str(&format!("    <width>{w}</width>\n"));
    out.push_str(&format!("    <height>{h}</height>\n"));
    out.push_str("    <depth>3</depth>\n");
    out.push_str("  </size>\n");
    for det in detections {
        out.push_str("  <object>\n");
        out.push_str(&format!("    <name>{}</name>\n", CLASS_NAMES[det.class_id]));
        out.push_str(&format!("    <score>{}</score>\n", det.score));
        out.push_str("    <bndbox>\n");
        out.push_str(&format!("      <xmin>{}</xmin>\n", det.box_.x0.floor() as i64));
        out.push_str(&format!("      <ymin>{}</ymin>\n", det.box_.y0.floor() as i64));
        out.push_str(&format!("      <xmax>{}</xmax>\n", det.box_.x1.ceil() as i64));
        out.push_str(&format!("      <ymax>{}</ymax>\n", det.box_.y1.ceil() as i64));
        out.push_str("    </bndbox>\n");
        out.push_str("  </object>\n");
    }
    out.push_str("</annotation>\n");
    out
}

#[derive(Default)]
struct ObjectFields {
    name: Option<String>,
    score: Option<f64>,
    xmin: Option<f64>,
    ymin: Option<f64>,
    xmax: Option<f64>,
    ymax: Option<f64>,
    saw_bndbox: bool,
}

/// Parse a document produced by [`export_voc_xml`] (or any VOC-shaped
/// file) back into detections.
pub fn parse_voc_xml(text: &str) -> Result<Vec<Detection>> {
    let mut reader = Reader::from_str(text);
    reader.config_mut().trim_text(true);

    let mut detections = Vec::new();
    let mut object_index = 0usize;
    let mut current: Option<ObjectFields> = None;
    let mut path: Vec<String> = Vec::new();

    loop {
        match reader.read_event() {
            Err(e) => return Err(Error::Xml(e.to_string())),
            Ok(Event::Eof) => break,
            Ok(Event::Start(e)) => {
                let tag = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if tag == "object" {
                    current = Some(ObjectFields::default());
                }
                if tag == "bndbox" {
                    if let Some(obj) = current.as_mut() {
                        obj.saw_bndbox = true;
                    }
                }
                path.push(tag);
            }
            Ok(Event::End(_)) => {
                let tag = path.pop().unwrap_or_default();
                if tag == "object" {
                    let obj = current.take().unwrap_or_default();
                    detections.push(finish_object(obj, object_index)?);
                    object_index += 1;
                }
            }
            Ok(Event::Text(t)) => {
                let value = t
                    .decode()
                    .map_err(|e| Error::Xml(e.to_string()))?
                    .into_owned();
                if let (Some(obj), Some(tag)) = (current.as_mut(), path.last()) {
                    let parse_num = |v: &str| -> Result<f64> {
                        v.trim().parse::<f64>().map_err(|_| Error::XmlObject {
                            index: object_index,
                            message: format!("invalid number {v:?} in <{tag}>"),
                        })
                    };
                    match tag.as_str() {
                        "name" => obj.name = Some(value),
                        "score" => obj.score = Some(parse_num(&value)?),
                        "xmin" => obj.xmin = Some(parse_num(&value)?),
                        "ymin" => obj.ymin = Some(parse_num(&value)?),
                        "xmax" => obj.xmax = Some(parse_num(&value)?),
                        "ymax" => obj.ymax = Some(parse_num(&value)?),
                        _ => {}
                    }
                }
            }
            Ok(_) => {}
        }
    }
    Ok(detections)
}

fn finish_object(obj: ObjectFields, index: usize) -> Result<Detection> {
    let missing = |what: &str| Error::XmlObject {
        index,
        message: format!("missing <{what}>"),
    };
    let name = obj.name.ok_or_else(|| missing("name"))?;
    let class_id = class_id_from_label(&name)?;
    if !obj.saw_bndbox {
        return Err(missing("bndbox"));
    }
    let x0 = obj.xmin.ok_or_else(|| missing("xmin"))?;
    let y0 = obj.ymin.ok_or_else(|| missing("ymin"))?;
    let x1 = obj.xmax.ok_or_else(|| missing("xmax"))?;
    let y1 = obj.ymax.ok_or_else(|| missing("ymax"))?;
    let box_ = BoxXYXY::new(x0, y0, x1, y1)
        .map_err(|e| Error::XmlObject { index, message: e.to_string() })?;
    let score = obj.score.unwrap_or(1.0);
    Ok(Detection::new(box_, class_id, score, 1.0, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, class_id: usize, score: f64) -> Detection {
        Detection::new(BoxXYXY::new(x0, y0, x1, y1).unwrap(), class_id, score, 1.0, 3)
    }

    #[test]
    fn empty_detections_yield_valid_document() {
        let xml = export_voc_xml("img_1", &[], (96, 96));
        let parsed = parse_voc_xml(&xml).unwrap();
        assert!(parsed.is_empty());
    }

    #[test]
    fn corner_rounding_follows_floor_ceil() {
        let xml = export_voc_xml("img_1", &[det(10.2, 20.8, 30.1, 40.0, 1, 0.5)], (96, 96));
        assert!(xml.contains("<xmin>10</xmin>"));
        assert!(xml.contains("<ymin>20</ymin>"));
        assert!(xml.contains("<xmax>31</xmax>"));
        assert!(xml.contains("<ymax>40</ymax>"));
    }

    #[test]
    fn export_parse_roundtrip() {
        let dets = vec![
            det(10.0, 20.0, 31.0, 40.0, 1, 0.875),
            det(0.0, 0.0, 96.0, 50.0, 0, 0.4375),
        ];
        let xml = export_voc_xml("img_2", &dets, (96, 96));
        let parsed = parse_voc_xml(&xml).unwrap();
        assert_eq!(parsed.len(), 2);
        for (p, d) in parsed.iter().zip(&dets) {
            assert_eq!(p.box_, d.box_);
            assert_eq!(p.class_id, d.class_id);
            assert_eq!(p.score, d.score);
        }
    }

    #[test]
    fn whitespace_variants_parse_identically() {
        let dets = vec![det(3.0, 4.0, 20.0, 30.0, 0, 0.625)];
        let xml = export_voc_xml("x", &dets, (64, 64));
        let squashed: String = xml.split('\n').map(str::trim).collect::<Vec<_>>().join("");
        let spaced = xml.replace("  ", "\t\t").replace('\n', "\n\n");
        let a = parse_voc_xml(&xml).unwrap();
        let b = parse_voc_xml(&squashed).unwrap();
        let c = parse_voc_xml(&spaced).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn missing_bndbox_names_object_index() {
        let xml = "<annotation><object><name>Insulator</name></object></annotation>";
        match parse_voc_xml(xml) {
            Err(Error::XmlObject { index, message }) => {
                assert_eq!(index, 0);
                assert!(message.contains("bndbox"));
            }
            other => panic!("expected XmlObject error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        let xml = "<annotation><object><name>Bird</name><bndbox><xmin>0</xmin><ymin>0</ymin><xmax>1</xmax><ymax>1</ymax></bndbox></object></annotation>";
        assert!(matches!(parse_voc_xml(xml), Err(Error::UnknownLabel { .. })));
    }

    #[test]
    fn missing_score_defaults_to_one() {
        let xml = "<annotation><object><name>Insulator</name><bndbox><xmin>1</xmin><ymin>2</ymin><xmax>5</xmax><ymax>9</ymax></bndbox></object></annotation>";
        let parsed = parse_voc_xml(xml).unwrap();
        assert_eq!(parsed[0].score, 1.0);
    }

    #[test]
    fn fuzzed_reserialization_is_stable() {
        use rand::RngExt;
        let mut rng = crate::rng::stream(12, "voc_fuzz");
        for _ in 0..100 {
            let n = rng.random_range(0..5);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let x0 = rng.random_range(0..50) as f64;
                    let y0 = rng.random_range(0..50) as f64;
                    det(
                        x0,
                        y0,
                        x0 + rng.random_range(1..40) as f64,
                        y0 + rng.random_range(1..40) as f64,
                        rng.random_range(0..2),
                        rng.random_range(1..1000) as f64 / 1000.0,
                    )
                })
                .collect();
            let xml = export_voc_xml("f", &dets, (128, 128));
            let parsed = parse_voc_xml(&xml).unwrap();
            let xml2 = export_voc_xml("f", &parsed, (128, 128));
            assert_eq!(xml, xml2);
        }
    }
}
