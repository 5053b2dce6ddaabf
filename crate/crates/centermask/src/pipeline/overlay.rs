//! PNG visualization of inference results: translucent mask fills,
//! 1-pixel box outlines, and a tiny built-in 5x7 bitmap font for the
//! class/score labels (no external font dependency, so output bytes are
//! fully deterministic).

use crate::data::CLASS_NAMES;
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::sagmask::MaskInstance;
use crate::tensor::Tensor;

/// Fill/outline colors keyed by class id.
const PALETTE: [[u8; 3]; 4] = [
    [80, 220, 120],
    [240, 90, 60],
    [90, 140, 240],
    [230, 200, 70],
];

const MASK_ALPHA: f64 = 0.45;

fn color_for(class_id: usize) -> [u8; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// 5x7 glyphs; each row byte uses bit 4 as the leftmost column. Only the
/// characters appearing in labels are included; anything else renders as
/// a blank cell.
fn glyph(c: char) -> [u8; 7] {
    match c {
        'I' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b11111],
        'n' => [0b00000, 0b00000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001],
        's' => [0b00000, 0b00000, 0b01111, 0b10000, 0b01110, 0b00001, 0b11110],
        'u' => [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b10011, 0b01101],
        'l' => [0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'a' => [0b00000, 0b00000, 0b01110, 0b00001, 0b01111, 0b10001, 0b01111],
        't' => [0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0b00100, 0b00011],
        'o' => [0b00000, 0b00000, 0b01110, 0b10001, 0b10001, 0b10001, 0b01110],
        'r' => [0b00000, 0b00000, 0b10110, 0b11001, 0b10000, 0b10000, 0b10000],
        'e' => [0b00000, 0b00000, 0b01110, 0b10001, 0b11111, 0b10000, 0b01110],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        _ => [0; 7],
    }
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<u8>, // RGB interleaved
}

impl Canvas {
    fn from_tensor(image: &Tensor) -> Canvas {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let mut data = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(y * w + x) * 3 + c] =
                        (image.at3(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Canvas { h, w, data }
    }

    fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    fn blend(&mut self, x: usize, y: usize, color: [u8; 3], alpha: f64) {
        let i = (y * self.w + x) * 3;
        for c in 0..3 {
            let old = self.data[i + c] as f64;
            self.data[i + c] = (old * (1.0 - alpha) + color[c] as f64 * alpha).round() as u8;
        }
    }

    fn encode_png(&self) -> Result<Vec<u8>> {
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(self.w as u32, self.h as u32, self.data.clone())
                .expect("buffer size matches");
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("png encode: {e}")))?;
        Ok(bytes)
    }
}

/// Draw one glyph run, clipped to the canvas and to `clip` (x0, y0, x1, y1).
fn draw_text(canvas: &mut Canvas, text: &str, x: i64, y: i64, color: [u8; 3], clip: (i64, i64, i64, i64)) {
    let (cx0, cy0, cx1, cy1) = clip;
    for (k, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        let gx = x + (k as i64) * 6;
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5i64 {
                if bits & (1 << (4 - col)) != 0 {
                    let (px, py) = (gx + col, y + row as i64);
                    if px >= cx0 && px < cx1 && py >= cy0 && py < cy1 {
                        canvas.set(px, py, color);
                    }
                }
            }
        }
    }
}

/// Render detections and mask instances over an image as PNG bytes.
///
/// Insulator masks become translucent fills; every detection gets a
/// 1-pixel rectangle plus a class/score label, all drawn strictly inside
/// the detection's box so the pixel diff of a single detection stays
/// within its rectangle. With no detections and no masks the output is
/// the input re-encoded.
pub fn render_overlay(
    image: &Tensor,
    detections: &[Detection],
    masks: &[MaskInstance],
) -> Result<Vec<u8>> {
    let mut canvas = Canvas::from_tensor(image);
    for inst in masks {
        let color = color_for(inst.detection.class_id);
        for y in 0..inst.binary_mask.h.min(canvas.h) {
            for x in 0..inst.binary_mask.w.min(canvas.w) {
                if inst.binary_mask.get(y, x) {
                    canvas.blend(x, y, color, MASK_ALPHA);
                }
            }
        }
    }
    for det in detections {
        let color = color_for(det.class_id);
        let x0 = det.box_.x0.floor() as i64;
        let y0 = det.box_.y0.floor() as i64;
        let x1 = (det.box_.x1.ceil() as i64 - 1).max(x0);
        let y1 = (det.box_.y1.ceil() as i64 - 1).max(y0);
        for x in x0..=x1 {
            canvas.set(x, y0, color);
            canvas.set(x, y1, color);
        }
        for y in y0..=y1 {
            canvas.set(x0, y, color);
            canvas.set(x1, y, color);
        }
        let label = format!("{} {:.2}", CLASS_NAMES[det.class_id], det.score);
        draw_text(
            &mut canvas,
            &label,
            x0 + 2,
            y0 + 2,
            color,
            (x0, y0, x1 + 1, y1 + 1),
        );
    }
    canvas.encode_png()
}
