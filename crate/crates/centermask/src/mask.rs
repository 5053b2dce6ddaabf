//! Binary image masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A full-image boolean mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Tight bounds of the set pixels as (x0, y0, x1, y1) in pixel-index
    /// space, or None when empty.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut found = false;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    found = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        found.then_some((x0, y0, x1, y1))
    }
}

/// Run-length encoding of a [`BinaryMask`]: row-major scan, alternating
/// run lengths starting with the number of leading zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Rle {
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0usize;
        for &bit in &mask.data {
            if bit == current {
                count += 1;
            } else {
                runs.push(count);
                current = bit;
                count = 1;
            }
        }
        runs.push(count);
        if mask.data.is_empty() {
            runs.clear();
        }
        Rle {
            height: mask.h,
            width: mask.w,
            runs,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let total: usize = self.runs.iter().sum();
        if total != self.height * self.width {
            return Err(Error::Data(format!(
                "RLE runs sum to {total}, expected {}",
                self.height * self.width
            )));
        }
        let mut mask = BinaryMask::zeros(self.height, self.width);
        let mut pos = 0usize;
        let mut value = false;
        for &run in &self.runs {
            if value {
                for v in &mut mask.data[pos..pos + run] {
                    *v = true;
                }
            }
            pos += run;
            value = !value;
        }
        Ok(mask)
    }
}
