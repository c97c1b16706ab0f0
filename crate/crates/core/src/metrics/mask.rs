use crate::error::{Error, Result};

/// One bit per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::DataLength {
                shape: vec![height, width],
                expected: height * width,
                actual: bits.len(),
            });
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Binarizes probabilities at 0.5 (strictly greater is foreground).
    pub fn from_probs(height: usize, width: usize, probs: &[f64]) -> Result<Self> {
        Self::new(height, width, probs.iter().map(|&p| p > 0.5).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_extents(other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn check_extents(&self, other: &BinaryMask) -> Result<()> {
        if self.extents() != other.extents() {
            return Err(Error::shape(
                "mask extents",
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }

    /// 0/1 values as reals.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Block-average downsampling by an integer factor, thresholded at 0.5.
    pub fn downsample(&self, factor: usize) -> BinaryMask {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = BinaryMask::empty(h, w);
        let area = (factor * factor) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut count = 0usize;
                for dy in 0..factor {
                    for dx in 0..factor {
                        count += self.get(y * factor + dy, x * factor + dx) as usize;
                    }
                }
                out.set(y, x, count as f64 / area >= 0.5);
            }
        }
        out
    }
}
