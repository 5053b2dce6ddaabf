//! Deterministic synthetic insulator scenes.
//!
//! Each image holds 1-3 vertical "insulator strings" (stacks of elliptical
//! discs joined by a thin bar) over textured noise and rectangular
//! clutter. Every string yields one "Insulator" polygon; with probability
//! 1/2 it carries one dark blob defect with its own "Insulator error"
//! polygon and box.
//!
//! Reproducibility: every geometric decision is drawn as an integer from a
//! xoshiro256** stream (`seed ^ record_index`, SplitMix64-expanded), and
//! ellipse arcs use hard-coded unit-circle constants instead of libm trig,
//! so records are byte-stable across platforms.

use rand::RngExt;
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{DatasetRecord, Instance, CLASS_DEFECT, CLASS_INSULATOR};

const C1: f64 = 0.38268343236508978; // sin 22.5 deg
const C2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const C3: f64 = 0.92387953251128674; // sin 67.5 deg

/// Left half-arc of a unit circle from top (0, -1) to bottom (0, 1).
const LEFT_ARC: [(f64, f64); 9] = [
    (0.0, -1.0),
    (-C1, -C3),
    (-C2, -C2),
    (-C3, -C1),
    (-1.0, 0.0),
    (-C3, C1),
    (-C2, C2),
    (-C1, C3),
    (0.0, 1.0),
];

/// Full 16-gon approximation of a unit circle.
const CIRCLE16: [(f64, f64); 16] = [
    (1.0, 0.0),
    (C3, C1),
    (C2, C2),
    (C1, C3),
    (0.0, 1.0),
    (-C1, C3),
    (-C2, C2),
    (-C3, C1),
    (-1.0, 0.0),
    (-C3, -C1),
    (-C2, -C2),
    (-C1, -C3),
    (0.0, -1.0),
    (C1, -C3),
    (C2, -C2),
    (C3, -C1),
];

struct StringGeometry {
    cx: i64,
    y_top: i64,
    discs: usize,
    rx: i64,
    ry: i64,
    gap: i64,
    bar: i64,
}

impl StringGeometry {
    fn disc_center_y(&self, i: usize) -> i64 {
        self.y_top + self.ry + i as i64 * (2 * self.ry + self.gap)
    }

    /// Simple polygon tracing the union of discs and connecting bar:
    /// down the left side, back up the right.
    fn polygon(&self) -> Vec<(f64, f64)> {
        let (cx, rx, ry, bar) = (self.cx as f64, self.rx as f64, self.ry as f64, self.bar as f64);
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for i in 0..self.discs {
            let cy = self.disc_center_y(i) as f64;
            if i == 0 {
                pts.push((cx, cy - ry));
            } else {
                pts.push((cx - bar, cy - ry));
            }
            for &(ax, ay) in &LEFT_ARC[1..8] {
                pts.push((cx + rx * ax, cy + ry * ay));
            }
            if i == self.discs - 1 {
                pts.push((cx, cy + ry));
            } else {
                pts.push((cx - bar, cy + ry));
            }
        }
        for i in (0..self.discs).rev() {
            let cy = self.disc_center_y(i) as f64;
            if i != self.discs - 1 {
                pts.push((cx + bar, cy + ry));
            }
            for &(ax, ay) in LEFT_ARC[1..8].iter().rev() {
                pts.push((cx - rx * ax, cy + ry * ay));
            }
            if i != 0 {
                pts.push((cx + bar, cy - ry));
            }
        }
        pts
    }
}

fn blob_polygon(bx: i64, by: i64, rr: i64) -> Vec<(f64, f64)> {
    CIRCLE16
        .iter()
        .map(|&(ax, ay)| (bx as f64 + rr as f64 * ax, by as f64 + rr as f64 * ay))
        .collect()
}

fn generate_record(seed: u64, index: usize, h: usize, w: usize) -> Result<DatasetRecord> {
    let mut rng: Xoshiro256StarStar = crate::rng::record_stream(seed, index as u64);
    let (hi, wi) = (h as i64, w as i64);

    // 1. String count and column slots.
    let n_strings = rng.random_range(1..=3usize);
    let slots = [wi / 6, wi / 2, 5 * wi / 6];
    let mut chosen: Vec<i64> = Vec::new();
    let mut available: Vec<i64> = slots.to_vec();
    for _ in 0..n_strings {
        let pick = rng.random_range(0..available.len());
        chosen.push(available.remove(pick));
    }
    chosen.sort_unstable();

    // 2. Per-string geometry (integers only).
    let mut strings: Vec<StringGeometry> = Vec::new();
    for &slot in &chosen {
        let cx = slot + rng.random_range(-3..=3i64);
        let rx = rng.random_range(5..=7i64);
        let ry = rng.random_range(3..=4i64);
        let mut discs = rng.random_range(4..=8usize);
        let gap = rng.random_range(1..=3i64);
        let bar = if rx >= 6 { rng.random_range(1..=2i64) } else { 1 };
        let height_of = |k: usize| k as i64 * 2 * ry + (k as i64 - 1) * gap;
        while discs > 3 && height_of(discs) > hi - 16 {
            discs -= 1;
        }
        let span = hi - 8 - height_of(discs) - 8;
        let y_top = 8 + if span > 0 { rng.random_range(0..=span) } else { 0 };
        strings.push(StringGeometry {
            cx,
            y_top,
            discs,
            rx,
            ry,
            gap,
            bar,
        });
    }

    // 3. Defect decisions.
    struct Defect {
        string: usize,
        bx: i64,
        by: i64,
        rr: i64,
    }
    let mut defects: Vec<Defect> = Vec::new();
    for (si, s) in strings.iter().enumerate() {
        if rng.random_range(0..2u32) == 1 {
            let disc = rng.random_range(0..s.discs);
            let side = if rng.random_range(0..2u32) == 0 { -1 } else { 1 };
            let rr = rng.random_range(5..=7i64);
            let bx = (s.cx + side * (s.rx - 2)).clamp(rr + 1, wi - rr - 2);
            let by = s.disc_center_y(disc).clamp(rr + 1, hi - rr - 2);
            defects.push(Defect { string: si, bx, by, rr });
        }
    }

    // 4. Background: per-pixel gray noise, then rectangular clutter.
    let mut image = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let v = 0.05 + 0.30 * rng.random::<f64>();
            for c in 0..3 {
                let i = image.idx3(c, y, x);
                image.data_mut()[i] = v;
            }
        }
    }
    let n_clutter = rng.random_range(2..=4usize);
    for _ in 0..n_clutter {
        let cw = rng.random_range(6..=20i64);
        let ch = rng.random_range(6..=20i64);
        let x0 = rng.random_range(0..(wi - cw).max(1));
        let y0 = rng.random_range(0..(hi - ch).max(1));
        let v = 0.20 + 0.25 * rng.random::<f64>();
        for y in y0..y0 + ch {
            for x in x0..x0 + cw {
                for c in 0..3 {
                    let i = image.idx3(c, y as usize, x as usize);
                    image.data_mut()[i] = v;
                }
            }
        }
    }

    // 5. Instances: build polygons, rasterize, paint.
    let mut instances: Vec<Instance> = Vec::new();
    for (si, s) in strings.iter().enumerate() {
        let inst = Instance::from_polygon(CLASS_INSULATOR, s.polygon(), h, w)?;
        let period = (2 * (s.ry + s.gap)).max(2);
        for y in 0..h {
            for x in 0..w {
                if inst.mask.get(y, x) {
                    let phase = (y as i64 - s.y_top).rem_euclid(period);
                    let band = if phase < s.ry + s.gap { 0.16 } else { 0.0 };
                    let v = 0.60 + band;
                    let i0 = image.idx3(0, y, x);
                    let i1 = image.idx3(1, y, x);
                    let i2 = image.idx3(2, y, x);
                    image.data_mut()[i0] = v * 0.95;
                    image.data_mut()[i1] = v * 0.98;
                    image.data_mut()[i2] = v;
                }
            }
        }
        instances.push(inst);
        for d in defects.iter().filter(|d| d.string == si) {
            let dark = 0.08 + 0.06 * rng.random::<f64>();
            let inst = Instance::from_polygon(CLASS_DEFECT, blob_polygon(d.bx, d.by, d.rr), h, w)?;
            for y in 0..h {
                for x in 0..w {
                    if inst.mask.get(y, x) {
                        for c in 0..3 {
                            let i = image.idx3(c, y, x);
                            image.data_mut()[i] = dark;
                        }
                    }
                }
            }
            instances.push(inst);
        }
    }

    Ok(DatasetRecord {
        image_id: format!("synth_{seed}_{index:04}"),
        image,
        instances,
    })
}

/// Generate `n` deterministic records of size `image_size = (h, w)`.
pub fn synth_generate(seed: u64, n: usize, image_size: (usize, usize)) -> Result<Vec<DatasetRecord>> {
    let (h, w) = image_size;
    if n < 1 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if h < 64 || w < 64 {
        return Err(Error::InvalidArgument(format!(
            "image size must be at least 64x64, got {h}x{w}"
        )));
    }
    (0..n).map(|i| generate_record(seed, i, h, w)).collect()
}
