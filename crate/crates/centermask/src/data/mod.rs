//! Dataset handling: annotation records, Labelme JSON ingestion, polygon
//! rasterization, multi-scale augmentation, the synthetic dataset
//! generator, and VOC-style XML export of detections.
//!
//! On-disk dataset layout:
//!
//! ```text
//! <dir>/images/<image_id>.png
//! <dir>/annotations/<image_id>.json     (Labelme format)
//! <dir>/train.txt, val.txt, ...         (one image_id per line)
//! ```

pub mod augment;
pub mod labelme;
pub mod raster;
pub mod synth;
pub mod voc;

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub use augment::{multi_scale_resize, AugmentationConfig};
pub use labelme::{parse_labelme, write_labelme};
pub use raster::polygon_to_mask;
pub use synth::synth_generate;
pub use voc::{export_voc_xml, parse_voc_xml};

/// Class ids are fixed: 0 is the insulator instance, 1 the defect point.
pub const CLASS_NAMES: [&str; 2] = ["Insulator", "Insulator error"];
pub const CLASS_INSULATOR: usize = 0;
pub const CLASS_DEFECT: usize = 1;

/// Strict label lookup; unknown labels (including case variants) are
/// rejected rather than coerced.
pub fn class_id_from_label(label: &str) -> Result<usize> {
    CLASS_NAMES
        .iter()
        .position(|&n| n == label)
        .ok_or_else(|| Error::UnknownLabel {
            label: label.to_string(),
        })
}

/// One annotated instance. The box is always the tight axis-aligned bound
/// of the polygon and the mask its rasterization; both are derived in the
/// constructor, never stored independently.
#[derive(Clone, Debug)]
pub struct Instance {
    pub class_id: usize,
    pub polygon: Vec<(f64, f64)>,
    pub box_: BoxXYXY,
    pub mask: BinaryMask,
}

impl Instance {
    /// Build an instance from a polygon, clipping it to the image bounds.
    pub fn from_polygon(class_id: usize, polygon: Vec<(f64, f64)>, h: usize, w: usize) -> Result<Self> {
        let clipped: Vec<(f64, f64)> = polygon
            .into_iter()
            .map(|(x, y)| (x.clamp(0.0, w as f64), y.clamp(0.0, h as f64)))
            .collect();
        let mask = polygon_to_mask(&clipped, h, w)?;
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &clipped {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        Ok(Instance {
            class_id,
            polygon: clipped,
            box_: BoxXYXY::new(x0, y0, x1, y1)?,
            mask,
        })
    }
}

/// One image with its ground-truth instances. `image` is `[3, H, W]` RGB
/// in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub image_id: String,
    pub image: Tensor,
    pub instances: Vec<Instance>,
}

impl DatasetRecord {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Encode an `[3, H, W]` tensor as PNG bytes (values clamped to `[0, 1]`).
pub fn image_to_png(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (image.at3(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            rgb.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    let mut bytes = Vec::new();
    rgb.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encode: {e}")))?;
    Ok(bytes)
}

/// Decode PNG bytes to an `[3, H, W]` tensor in `[0, 1]`.
pub fn png_to_image(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                let i = out.idx3(c, y, x);
                out.data_mut()[i] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Write records to the dataset directory layout and list their ids in
/// `split_name`.
pub fn save_dataset(dir: &Path, records: &[DatasetRecord], split_name: &str) -> Result<()> {
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&annotations).map_err(|e| Error::io(&annotations, e))?;
    let mut split = String::new();
    for record in records {
        let png = image_to_png(&record.image)?;
        crate::io_util::write_atomic(&images.join(format!("{}.png", record.image_id)), &png)?;
        let json = write_labelme(record);
        crate::io_util::write_atomic(
            &annotations.join(format!("{}.json", record.image_id)),
            json.as_bytes(),
        )?;
        split.push_str(&record.image_id);
        split.push('\n');
    }
    crate::io_util::write_atomic(&dir.join(split_name), split.as_bytes())
}

/// Load the records listed in `split_name` from a dataset directory.
pub fn load_dataset(dir: &Path, split_name: &str) -> Result<Vec<DatasetRecord>> {
    let split_path = dir.join(split_name);
    let listing = crate::io_util::read_to_string(&split_path)?;
    let mut records = Vec::new();
    for image_id in listing.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let ann_path = dir.join("annotations").join(format!("{image_id}.json"));
        let text = crate::io_util::read_to_string(&ann_path)?;
        let mut record = parse_labelme(&text)?;
        record.image_id = image_id.to_string();
        let png_path = dir.join("images").join(format!("{image_id}.png"));
        let image = png_to_image(&crate::io_util::read_bytes(&png_path)?)?;
        if image.shape() != record.image.shape() {
            return Err(Error::Data(format!(
                "{image_id}: image is {:?} but annotation says {:?}",
                image.shape(),
                record.image.shape()
            )));
        }
        record.image = image;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_strict() {
        assert_eq!(class_id_from_label("Insulator").unwrap(), 0);
        assert_eq!(class_id_from_label("Insulator error").unwrap(), 1);
        assert!(class_id_from_label("insulator").is_err());
        assert!(class_id_from_label("Insulator ").is_err());
    }

    #[test]
    fn instance_box_is_tight_polygon_bound() {
        let inst = Instance::from_polygon(
            0,
            vec![(2.0, 3.0), (9.0, 4.0), (6.0, 11.0)],
            16,
            16,
        )
        .unwrap();
        assert_eq!(inst.box_, BoxXYXY::new(2.0, 3.0, 9.0, 11.0).unwrap());
        // Mask pixels stay inside the box (pixel-center containment).
        for y in 0..16 {
            for x in 0..16 {
                if inst.mask.get(y, x) {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    assert!(cx > inst.box_.x0 && cx < inst.box_.x1);
                    assert!(cy > inst.box_.y0 && cy < inst.box_.y1);
                }
            }
        }
    }

    #[test]
    fn instance_clips_to_image_bounds() {
        let inst = Instance::from_polygon(
            1,
            vec![(-5.0, -5.0), (30.0, -5.0), (30.0, 30.0), (-5.0, 30.0)],
            8,
            8,
        )
        .unwrap();
        assert_eq!(inst.box_, BoxXYXY::new(0.0, 0.0, 8.0, 8.0).unwrap());
        assert_eq!(inst.mask.count(), 64);
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let mut r = crate::rng::stream(3, "png");
        let img = crate::rng::uniform_tensor(&mut r, &[3, 6, 9], 0.0, 1.0);
        let bytes = image_to_png(&img).unwrap();
        let back = png_to_image(&bytes).unwrap();
        assert_eq!(back.shape(), &[3, 6, 9]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }
}
