//! Pixel-space primitives: boxes, raster masks, patch tilings, IoU, the
//! area filter, and the dynamic per-subject IoU threshold.
//!
//! Boxes are half-open on the max edges: a box covers pixel columns
//! `x_min..x_max` and rows `y_min..y_max`, so area is exactly
//! `(x_max - x_min) * (y_max - y_min)` with no off-by-one ambiguity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Axis-aligned pixel box, half-open on the max edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, GeometryError> {
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidArgument(format!(
                "degenerate box ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains_within(&self, image_w: u32, image_h: u32) -> bool {
        self.x_max <= image_w && self.y_max <= image_h
    }

    /// Pixel count of the intersection with `other`.
    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = (self.x_max.min(other.x_max)).saturating_sub(self.x_min.max(other.x_min));
        let h = (self.y_max.min(other.y_max)).saturating_sub(self.y_min.max(other.y_min));
        w as u64 * h as u64
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            return 0.0;
        }
        inter as f64 / union as f64
    }
}

/// Row-major boolean raster, dimensioned to a full image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterMask {
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
}

impl RasterMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; (width as usize) * (height as usize)] }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, GeometryError> {
        if bits.len() != (width as usize) * (height as usize) {
            return Err(GeometryError::InvalidArgument(format!(
                "mask bit length {} does not match {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    /// Rasterize a box onto a full-image mask.
    pub fn from_box(width: u32, height: u32, b: &BBox) -> Self {
        let mut mask = Self::empty(width, height);
        mask.fill_box(b, true);
        mask
    }

    pub fn fill_box(&mut self, b: &BBox, value: bool) {
        let x0 = b.x_min.min(self.width) as usize;
        let x1 = b.x_max.min(self.width) as usize;
        for y in b.y_min.min(self.height)..b.y_max.min(self.height) {
            let row = y as usize * self.width as usize;
            for bit in &mut self.bits[row + x0..row + x1] {
                *bit = value;
            }
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn popcount(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    /// Foreground pixel count inside a box window.
    pub fn popcount_in(&self, b: &BBox) -> u64 {
        let x0 = b.x_min.min(self.width) as usize;
        let x1 = b.x_max.min(self.width) as usize;
        let mut count = 0u64;
        for y in b.y_min.min(self.height)..b.y_max.min(self.height) {
            let row = y as usize * self.width as usize;
            count += self.bits[row + x0..row + x1].iter().filter(|&&v| v).count() as u64;
        }
        count
    }

    /// Run-length encode, row-major, first run counting zeros and alternating
    /// thereafter. This is the on-disk form used by the dataset manifest.
    pub fn to_rle(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run: u32 = 0;
        for &bit in &self.bits {
            if bit == current {
                run += 1;
            } else {
                counts.push(run);
                current = bit;
                run = 1;
            }
        }
        counts.push(run);
        RleMask { width: self.width, height: self.height, counts }
    }
}

/// Run-length encoded mask: row-major, `counts[0]` counts zeros, runs
/// alternate zero/one thereafter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn decode(&self) -> Result<RasterMask, GeometryError> {
        let total = self.width as u64 * self.height as u64;
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if sum != total {
            return Err(GeometryError::InvalidArgument(format!(
                "rle runs sum to {sum}, expected {total}"
            )));
        }
        let mut bits = Vec::with_capacity(total as usize);
        let mut value = false;
        for &run in &self.counts {
            bits.resize(bits.len() + run as usize, value);
            value = !value;
        }
        RasterMask::from_bits(self.width, self.height, bits)
    }
}

/// One cell of an M x M image tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub index: usize,
    pub rect: BBox,
}

/// Tile an image into M x M patches, row-major from the top-left. Base cell
/// size is `floor(width/M) x floor(height/M)`; remainder pixels are absorbed
/// by the last column and row so the union is exactly the image rectangle.
pub fn tile_image(width: u32, height: u32, m: u32) -> Result<Vec<PatchRect>, GeometryError> {
    if m < 1 {
        return Err(GeometryError::InvalidArgument("grid side must be >= 1".into()));
    }
    if width < m || height < m {
        return Err(GeometryError::InvalidArgument(format!(
            "image {width}x{height} smaller than grid side {m}"
        )));
    }
    let cell_w = width / m;
    let cell_h = height / m;
    let mut patches = Vec::with_capacity((m as usize) * (m as usize));
    for row in 0..m {
        for col in 0..m {
            let x_min = col * cell_w;
            let y_min = row * cell_h;
            let x_max = if col == m - 1 { width } else { (col + 1) * cell_w };
            let y_max = if row == m - 1 { height } else { (row + 1) * cell_h };
            patches.push(PatchRect {
                index: (row * m + col) as usize,
                rect: BBox { x_min, y_min, x_max, y_max },
            });
        }
    }
    Ok(patches)
}

/// A subject region: either its full bounding box or a raster mask.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Box(BBox),
    Mask(RasterMask),
}

impl Region {
    pub fn pixel_count(&self) -> u64 {
        match self {
            Region::Box(b) => b.area(),
            Region::Mask(m) => m.popcount(),
        }
    }

    pub fn bounding_box(&self) -> Option<BBox> {
        match self {
            Region::Box(b) => Some(*b),
            Region::Mask(m) => {
                let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
                let mut any = false;
                for y in 0..m.height {
                    for x in 0..m.width {
                        if m.get(x, y) {
                            any = true;
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x + 1);
                            y1 = y1.max(y + 1);
                        }
                    }
                }
                if any {
                    Some(BBox { x_min: x0, y_min: y0, x_max: x1, y_max: y1 })
                } else {
                    None
                }
            }
        }
    }
}

/// IoU between a subject region and a patch rectangle, in exact pixel
/// counts. An empty region (mask popcount zero) has IoU 0 with every patch.
pub fn region_patch_iou(region: &Region, patch: &BBox) -> f64 {
    let (inter, region_area) = match region {
        Region::Box(b) => (b.intersection_area(patch), b.area()),
        Region::Mask(m) => (m.popcount_in(patch), m.popcount()),
    };
    if region_area == 0 {
        return 0.0;
    }
    let union = region_area + patch.area() - inter;
    inter as f64 / union as f64
}

/// IoU of a region against every patch of a tiling, in patch-index order.
///
/// Masks are scanned once per patch window rather than once per pixel pair,
/// so a full grid costs O(width * height) per subject.
pub fn region_patch_ious(region: &Region, patches: &[PatchRect]) -> Vec<f64> {
    patches.iter().map(|p| region_patch_iou(region, &p.rect)).collect()
}

/// Dynamic IoU threshold: `tau = lambda * mean(strictly positive IoUs)`.
/// The mean runs over the K non-zero entries only; K = 0 yields tau = 0.
pub fn dynamic_threshold(ious: &[f64], lambda: f64) -> f64 {
    let mut sum = 0.0;
    let mut k = 0u32;
    for &v in ious {
        if v > 0.0 {
            sum += v;
            k += 1;
        }
    }
    if k == 0 {
        return 0.0;
    }
    lambda * (sum / k as f64)
}

/// Drop boxes whose area is strictly smaller than `delta * image_w * image_h`.
/// Order is preserved. The comparison is made on the area fraction so a
/// decimal `delta` like 0.01 lands exactly on its boundary.
pub fn area_filter(boxes: &[BBox], image_w: u32, image_h: u32, delta: f64) -> Vec<BBox> {
    let total = image_w as f64 * image_h as f64;
    boxes
        .iter()
        .filter(|b| (b.area() as f64) / total >= delta)
        .copied()
        .collect()
}

/// True when the box survives the area filter.
pub fn passes_area_filter(b: &BBox, image_w: u32, image_h: u32, delta: f64) -> bool {
    (b.area() as f64) / (image_w as f64 * image_h as f64) >= delta
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_rejects_degenerate() {
        assert!(BBox::new(0, 0, 0, 5).is_err());
        assert!(BBox::new(3, 1, 3, 5).is_err());
        assert!(BBox::new(0, 0, 1, 1).is_ok());
    }

    #[test]
    fn tile_exact_division() {
        let patches = tile_image(64, 64, 8).unwrap();
        assert_eq!(patches.len(), 64);
        for p in &patches {
            assert_eq!(p.rect.width(), 8);
            assert_eq!(p.rect.height(), 8);
        }
        assert_eq!(patches[0].rect, BBox { x_min: 0, y_min: 0, x_max: 8, y_max: 8 });
    }

    #[test]
    fn tile_last_patch_of_512() {
        let patches = tile_image(512, 512, 8).unwrap();
        assert_eq!(patches[63].rect, BBox { x_min: 448, y_min: 448, x_max: 512, y_max: 512 });
    }

    #[test]
    fn tile_remainder_goes_to_last_column() {
        let patches = tile_image(513, 512, 8).unwrap();
        for row in 0..8usize {
            for col in 0..7usize {
                assert_eq!(patches[row * 8 + col].rect.width(), 64);
            }
            assert_eq!(patches[row * 8 + 7].rect.width(), 65);
        }
    }

    #[test]
    fn tile_rejects_too_small() {
        assert!(tile_image(4, 64, 8).is_err());
        assert!(tile_image(64, 64, 0).is_err());
    }

    #[test]
    fn tiling_is_exact_partition() {
        for (w, h, m) in [(64, 64, 8), (513, 512, 8), (100, 37, 5), (9, 9, 3)] {
            let patches = tile_image(w, h, m).unwrap();
            let total: u64 = patches.iter().map(|p| p.rect.area()).sum();
            assert_eq!(total, w as u64 * h as u64);
            for (i, a) in patches.iter().enumerate() {
                assert_eq!(a.index, i);
                for b in &patches[i + 1..] {
                    assert_eq!(a.rect.intersection_area(&b.rect), 0);
                }
            }
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let p = BBox::new(0, 0, 8, 8).unwrap();
        assert_eq!(region_patch_iou(&Region::Box(p), &p), 1.0);
        let far = BBox::new(20, 20, 30, 30).unwrap();
        assert_eq!(region_patch_iou(&Region::Box(far), &p), 0.0);
    }

    #[test]
    fn iou_hand_case() {
        let region = BBox::new(0, 0, 12, 8).unwrap();
        let patch = BBox::new(8, 0, 16, 8).unwrap();
        assert_eq!(region_patch_iou(&Region::Box(region), &patch), 0.25);
    }

    #[test]
    fn empty_mask_iou_is_zero() {
        let mask = RasterMask::empty(16, 16);
        let patch = BBox::new(0, 0, 8, 8).unwrap();
        assert_eq!(region_patch_iou(&Region::Mask(mask), &patch), 0.0);
    }

    #[test]
    fn box_region_matches_rasterized_mask() {
        let b = BBox::new(3, 2, 13, 9).unwrap();
        let mask = RasterMask::from_box(16, 16, &b);
        for patch in tile_image(16, 16, 4).unwrap() {
            let via_box = region_patch_iou(&Region::Box(b), &patch.rect);
            let via_mask = region_patch_iou(&Region::Mask(mask.clone()), &patch.rect);
            assert_eq!(via_box, via_mask);
        }
    }

    #[test]
    fn dynamic_threshold_hand_cases() {
        assert!((dynamic_threshold(&[0.2, 0.4, 0.6, 0.0], 0.05) - 0.02).abs() < 1e-12);
        assert!((dynamic_threshold(&[1.0], 0.05) - 0.05).abs() < 1e-12);
        assert_eq!(dynamic_threshold(&[0.0, 0.0], 0.05), 0.0);
        assert_eq!(dynamic_threshold(&[], 0.05), 0.0);
    }

    #[test]
    fn area_filter_boundary_is_kept() {
        let kept = area_filter(&[BBox::new(0, 0, 100, 100).unwrap()], 1000, 1000, 0.01);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn area_filter_below_boundary_removed() {
        let kept = area_filter(&[BBox::new(0, 0, 99, 99).unwrap()], 1000, 1000, 0.01);
        assert!(kept.is_empty());
    }

    #[test]
    fn area_filter_zero_delta_keeps_all() {
        let boxes = vec![BBox::new(0, 0, 1, 1).unwrap(), BBox::new(5, 5, 7, 7).unwrap()];
        assert_eq!(area_filter(&boxes, 64, 64, 0.0), boxes);
    }

    #[test]
    fn rle_round_trip() {
        let mut mask = RasterMask::empty(8, 4);
        mask.fill_box(&BBox::new(1, 1, 5, 3).unwrap(), true);
        let rle = mask.to_rle();
        assert_eq!(rle.decode().unwrap(), mask);
        // First run counts zeros even when the mask starts with a one.
        let mut starts_set = RasterMask::empty(4, 1);
        starts_set.set(0, 0, true);
        assert_eq!(starts_set.to_rle().counts[0], 0);
    }

    #[test]
    fn mask_popcount_in_window() {
        let mut mask = RasterMask::empty(8, 8);
        mask.fill_box(&BBox::new(2, 2, 6, 6).unwrap(), true);
        assert_eq!(mask.popcount(), 16);
        assert_eq!(mask.popcount_in(&BBox::new(0, 0, 4, 4).unwrap()), 4);
    }
}
