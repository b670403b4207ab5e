//! Pixel-level binary masks and patch-lattice masks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{geometry, Error, Result};
use crate::image::{Image, Rgb};

/// Axis-aligned rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { top, left, height, width }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom() && col >= self.left && col < self.right()
    }

    pub fn intersection_area(&self, other: &Rect) -> usize {
        let h = self.bottom().min(other.bottom()).saturating_sub(self.top.max(other.top));
        let w = self.right().min(other.right()).saturating_sub(self.left.max(other.left));
        h * w
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn from_rect(height: usize, width: usize, rect: Rect) -> Self {
        Self::from_fn(height, width, |r, c| rect.contains(r, c))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(geometry!("{} mask values for {height}x{width}", data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    /// Out-of-bounds reads are background.
    #[inline]
    pub fn get_signed(&self, row: isize, col: isize) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.height
            && (col as usize) < self.width
            && self.get(row as usize, col as usize)
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    /// Pixels that are set and have at least one unset 4-neighbour (the
    /// border of the image counts as unset).
    pub fn boundary(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |r, c| {
            let (r, c) = (r as isize, c as isize);
            self.get_signed(r, c)
                && !(self.get_signed(r - 1, c)
                    && self.get_signed(r + 1, c)
                    && self.get_signed(r, c - 1)
                    && self.get_signed(r, c + 1))
        })
    }

    /// Erosion with the 3x3 cross structuring element.
    pub fn erode_cross(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |r, c| {
            let (r, c) = (r as isize, c as isize);
            self.get_signed(r, c)
                && self.get_signed(r - 1, c)
                && self.get_signed(r + 1, c)
                && self.get_signed(r, c - 1)
                && self.get_signed(r, c + 1)
        })
    }

    /// Dilation with the 3x3 cross structuring element.
    pub fn dilate_cross(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |r, c| {
            let (r, c) = (r as isize, c as isize);
            self.get_signed(r, c)
                || self.get_signed(r - 1, c)
                || self.get_signed(r + 1, c)
                || self.get_signed(r, c - 1)
                || self.get_signed(r, c + 1)
        })
    }

    pub fn open_cross(&self) -> BinaryMask {
        self.erode_cross().dilate_cross()
    }

    pub fn to_image(&self, fg: Rgb, bg: Rgb) -> Image {
        Image::from_fn(self.height, self.width, |r, c| if self.get(r, c) { fg } else { bg })
            .expect("mask dimensions are positive")
    }

    /// Nearest-neighbour resampling, used for ground-truth regions.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |r, c| {
            let sr = ((r as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sc = ((c as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            self.get(sr.min(self.height - 1), sc.min(self.width - 1))
        })
    }
}

/// Boolean grid over the patch lattice; `true` marks a masked (hidden) patch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl PatchMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![false; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(geometry!("{} mask values for {rows}x{cols} patches", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Exactly `round(ratio * N)` patches hidden, chosen by a seeded shuffle.
    pub fn random(rows: usize, cols: usize, ratio: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(rows, cols, ratio, &mut rng)
    }

    pub fn random_with(rows: usize, cols: usize, ratio: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {ratio} outside (0,1)")));
        }
        if rows == 0 || cols == 0 {
            return Err(geometry!("empty patch grid {rows}x{cols}"));
        }
        let n = rows * cols;
        let k = (ratio * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut data = vec![false; n];
        for &i in &order[..k] {
            data[i] = true;
        }
        Ok(Self { rows, cols, data })
    }

    /// Mask covering a rectangle given in patch units.
    pub fn rect(rows: usize, cols: usize, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut m = Self::new(rows, cols);
        for r in top..(top + height).min(rows) {
            for c in left..(left + width).min(cols) {
                m.data[r * cols + c] = true;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.cols + col] = v;
    }

    pub fn masked_count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|i| !self.data[*i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|i| self.data[*i]).collect()
    }

    /// Pixel-level mask: the patch-wise dilation of the lattice mask.
    pub fn to_pixel_mask(&self, patch: usize) -> BinaryMask {
        BinaryMask::from_fn(self.rows * patch, self.cols * patch, |r, c| {
            self.is_masked(r / patch, c / patch)
        })
    }
}
