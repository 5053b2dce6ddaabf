//! Polygon rasterization.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Rasterize a polygon with the even-odd rule evaluated at pixel centers
/// `(x + 0.5, y + 0.5)`. Rejects polygons with fewer than 3 distinct
/// vertices.
pub fn polygon_to_mask(polygon: &[(f64, f64)], h: usize, w: usize) -> Result<BinaryMask> {
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &p in polygon {
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    if distinct.len() < 3 {
        return Err(Error::DegeneratePolygon);
    }

    let n = polygon.len();
    let mut mask = BinaryMask::zeros(h, w);
    for py in 0..h {
        let cy = py as f64 + 0.5;
        // Gather x-coordinates where edges cross the scanline, then set
        // pixels with an odd crossing count to the right of the center.
        let mut crossings: Vec<f64> = Vec::new();
        for i in 0..n {
            let (x1, y1) = polygon[i];
            let (x2, y2) = polygon[(i + 1) % n];
            if (y1 > cy) != (y2 > cy) {
                crossings.push(x1 + (cy - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for px in 0..w {
            let cx = px as f64 + 0.5;
            // Even-odd: inside iff an odd number of crossings lie right of cx.
            let right = crossings.iter().filter(|&&x| x > cx).count();
            if right % 2 == 1 {
                mask.set(py, px, true);
            }
        }
    }
    Ok(mask)
}
