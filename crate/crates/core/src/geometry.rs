//! Binary mask morphology and point geometry used by supervision extraction.
//!
//! Erosion and dilation are computed through exact two-pass distance
//! transforms: with the 4-connected cross element, `k` dilation steps reach
//! exactly the pixels within L1 distance `k` of the foreground, and with the
//! 8-connected square element the pixels within Chebyshev distance `k`.
//! Pixels outside the raster are background.

use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A real-valued image coordinate. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn pixel_center(x: usize, y: usize) -> Self {
        Self::new(x as f64 + 0.5, y as f64 + 0.5)
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        self.distance_sq(other).sqrt()
    }

    pub fn distance_sq(&self, other: &Point2D) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Pixel index under the point, if it falls inside a `width x height` raster.
    pub fn pixel(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        if !self.is_finite() {
            return None;
        }
        let (fx, fy) = (self.x.floor(), self.y.floor());
        if fx < 0.0 || fy < 0.0 || fx >= width as f64 || fy >= height as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }
}

/// 3x3 structuring element footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuringElement {
    /// Center plus its four edge neighbours.
    #[default]
    Cross4,
    /// Full 3x3 square.
    Square8,
}

impl StructuringElement {
    pub fn offsets(&self) -> &'static [(i64, i64)] {
        match self {
            StructuringElement::Cross4 => &[(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)],
            StructuringElement::Square8 => &[
                (0, 0),
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

/// Row-major boolean raster.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, {} foreground)",
            self.width,
            self.height,
            self.count()
        )
    }
}

impl BinaryMask {
    /// All-background mask.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "mask dimensions must be positive");
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        let mut m = Self::new(width, height);
        m.bits.fill(true);
        m
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::shape(
                format!("{width}x{height} bits"),
                format!("{} bits", bits.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Foreground test; anything outside the raster is background.
    pub fn get(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        self.bits[y as usize * self.width + x as usize]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        assert!(x < self.width && y < self.height);
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Set inclusion on foreground pixels. Masks of different size are never subsets.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| (i % self.width, i / self.width))
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as i64, y as i64) { 255 } else { 0 }])
        })
    }

    /// Nonzero pixels are foreground.
    pub fn from_gray_image(img: &GrayImage) -> Self {
        Self::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] > 0
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray_image().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_gray_image(&img))
    }
}

const UNREACHED: u32 = u32::MAX / 2;

/// Exact distance (L1 for `Cross4`, Chebyshev for `Square8`) from every pixel
/// to the nearest foreground pixel of `mask`, restricted to paths inside the
/// raster. Pixels are `UNREACHED` when the mask is empty.
fn distance_to_foreground(mask: &BinaryMask, element: StructuringElement) -> Vec<u32> {
    let (w, h) = (mask.width, mask.height);
    let mut d: Vec<u32> = mask
        .bits
        .iter()
        .map(|b| if *b { 0 } else { UNREACHED })
        .collect();
    let diagonal = element == StructuringElement::Square8;

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut best = d[i];
            if x > 0 {
                best = best.min(d[i - 1] + 1);
            }
            if y > 0 {
                best = best.min(d[i - w] + 1);
                if diagonal {
                    if x > 0 {
                        best = best.min(d[i - w - 1] + 1);
                    }
                    if x + 1 < w {
                        best = best.min(d[i - w + 1] + 1);
                    }
                }
            }
            d[i] = best;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            let mut best = d[i];
            if x + 1 < w {
                best = best.min(d[i + 1] + 1);
            }
            if y + 1 < h {
                best = best.min(d[i + w] + 1);
                if diagonal {
                    if x + 1 < w {
                        best = best.min(d[i + w + 1] + 1);
                    }
                    if x > 0 {
                        best = best.min(d[i + w - 1] + 1);
                    }
                }
            }
            d[i] = best;
        }
    }
    d
}

/// Binary erosion applied `iterations` times.
pub fn erode(mask: &BinaryMask, iterations: usize, element: StructuringElement) -> BinaryMask {
    if iterations == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let to_background = distance_to_foreground(&mask.complement(), element);
    let mut out = BinaryMask::new(w, h);
    let k = iterations.min(UNREACHED as usize) as u32;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.bits[i] {
                continue;
            }
            // The virtual background just outside the raster along either axis.
            let to_border = (x + 1).min(y + 1).min(w - x).min(h - y) as u32;
            out.bits[i] = to_background[i].min(to_border) > k;
        }
    }
    out
}

/// Binary dilation applied `iterations` times; growth never leaves the raster.
pub fn dilate(mask: &BinaryMask, iterations: usize, element: StructuringElement) -> BinaryMask {
    if iterations == 0 {
        return mask.clone();
    }
    let k = iterations.min(UNREACHED as usize - 1) as u32;
    let dist = distance_to_foreground(mask, element);
    BinaryMask {
        width: mask.width,
        height: mask.height,
        bits: dist.iter().map(|d| *d <= k).collect(),
    }
}

/// Center of the foreground pixel nearest to `point`; ties go to the smallest `(y, x)`.
pub fn project_point_to_mask(point: Point2D, mask: &BinaryMask) -> Result<Point2D> {
    if !point.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (w, h) = (mask.width as i64, mask.height as i64);
    let cx = (point.x.floor().max(0.0) as i64).min(w - 1);
    let cy = (point.y.floor().max(0.0) as i64).min(h - 1);

    // Every pixel center in ring `r` around the clamped start pixel lies at
    // least `r - 0.5` away from the query point.
    let mut best: Option<(f64, i64, i64)> = None;
    let max_ring = w.max(h);
    let consider = |x: i64, y: i64, best: &mut Option<(f64, i64, i64)>| {
        if !mask.get(x, y) {
            return;
        }
        let d = Point2D::pixel_center(x as usize, y as usize).distance_sq(&point);
        let better = match best {
            None => true,
            Some((bd, by, bx)) => (d, y, x) < (*bd, *by, *bx),
        };
        if better {
            *best = Some((d, y, x));
        }
    };
    for r in 0..=max_ring {
        if let Some((bd, _, _)) = best {
            let bound = r as f64 - 0.5;
            if bound > 0.0 && bound * bound > bd {
                break;
            }
        }
        if r == 0 {
            consider(cx, cy, &mut best);
            continue;
        }
        for x in (cx - r)..=(cx + r) {
            consider(x, cy - r, &mut best);
            consider(x, cy + r, &mut best);
        }
        for y in (cy - r + 1)..=(cy + r - 1) {
            consider(cx - r, y, &mut best);
            consider(cx + r, y, &mut best);
        }
    }
    let (_, y, x) = best.expect("non-empty mask yields a candidate");
    Ok(Point2D::pixel_center(x as usize, y as usize))
}

/// Accepts a projected fingertip pair when its spacing stays within
/// `[lo, hi]` times the original spacing. Coincident originals are rejected.
pub fn distance_ratio_gate(
    original: (Point2D, Point2D),
    projected: (Point2D, Point2D),
    lo: f64,
    hi: f64,
) -> bool {
    let d_orig = original.0.distance(&original.1);
    if !(d_orig > 0.0) || !d_orig.is_finite() {
        return false;
    }
    let ratio = projected.0.distance(&projected.1) / d_orig;
    ratio.is_finite() && lo <= ratio && ratio <= hi
}

pub const DEFAULT_RATIO_LO: f64 = 0.3;
pub const DEFAULT_RATIO_HI: f64 = 1.7;

/// True iff the pixel under `floor(point)` is in bounds and foreground.
pub fn mask_contains(mask: &BinaryMask, point: Point2D) -> bool {
    match point.pixel(mask.width, mask.height) {
        Some((x, y)) => mask.get(x as i64, y as i64),
        None => false,
    }
}
