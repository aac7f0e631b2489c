//! In-memory image handling. The pipeline's currency is PNG bytes plus
//! dimensions; pixels are decoded only when a crop or masked variant is
//! needed. All synthesis is deterministic so two runs with the same seed
//! produce byte-identical files.

use image::{ImageBuffer, ImageEncoder, Rgb, RgbImage};
use thiserror::Error;

use crate::geometry::{BBox, RasterMask};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("png decode failed: {0}")]
    Decode(String),
    #[error("png encode failed: {0}")]
    Encode(String),
    #[error("box ({0:?}) exceeds image bounds {1}x{2}")]
    OutOfBounds(BBox, u32, u32),
}

/// An image held as encoded PNG bytes with known dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub width: u32,
    pub height: u32,
    pub png: Vec<u8>,
}

impl ImageData {
    pub fn from_png(png: Vec<u8>) -> Result<Self, ImageError> {
        let decoded = image::load_from_memory_with_format(&png, image::ImageFormat::Png)
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        Ok(Self { width: decoded.width(), height: decoded.height(), png })
    }

    pub fn from_rgb(img: &RgbImage) -> Result<Self, ImageError> {
        let mut png = Vec::new();
        image::codecs::png::PngEncoder::new(&mut png)
            .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(Self { width: img.width(), height: img.height(), png })
    }

    pub fn decode_rgb(&self) -> Result<RgbImage, ImageError> {
        let decoded = image::load_from_memory_with_format(&self.png, image::ImageFormat::Png)
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        Ok(decoded.to_rgb8())
    }

    /// Crop the raw box region.
    pub fn crop(&self, b: &BBox) -> Result<ImageData, ImageError> {
        if !b.contains_within(self.width, self.height) {
            return Err(ImageError::OutOfBounds(*b, self.width, self.height));
        }
        crop_decoded(&self.decode_rgb()?, b)
    }

    /// Crop the box region, zeroing every pixel outside the mask. The mask
    /// is dimensioned to the full image.
    pub fn crop_masked(&self, b: &BBox, mask: &RasterMask) -> Result<ImageData, ImageError> {
        if !b.contains_within(self.width, self.height) {
            return Err(ImageError::OutOfBounds(*b, self.width, self.height));
        }
        crop_masked_decoded(&self.decode_rgb()?, b, mask)
    }
}

/// Crop from an already-decoded buffer. The box must fit the buffer.
pub fn crop_decoded(src: &RgbImage, b: &BBox) -> Result<ImageData, ImageError> {
    if !b.contains_within(src.width(), src.height()) {
        return Err(ImageError::OutOfBounds(*b, src.width(), src.height()));
    }
    let mut out: RgbImage = ImageBuffer::new(b.width(), b.height());
    for y in 0..b.height() {
        for x in 0..b.width() {
            out.put_pixel(x, y, *src.get_pixel(b.x_min + x, b.y_min + y));
        }
    }
    ImageData::from_rgb(&out)
}

/// Masked crop from an already-decoded buffer.
pub fn crop_masked_decoded(
    src: &RgbImage,
    b: &BBox,
    mask: &RasterMask,
) -> Result<ImageData, ImageError> {
    if !b.contains_within(src.width(), src.height()) {
        return Err(ImageError::OutOfBounds(*b, src.width(), src.height()));
    }
    let mut out: RgbImage = ImageBuffer::new(b.width(), b.height());
    for y in 0..b.height() {
        for x in 0..b.width() {
            let (sx, sy) = (b.x_min + x, b.y_min + y);
            let px = if mask.get(sx, sy) { *src.get_pixel(sx, sy) } else { Rgb([0, 0, 0]) };
            out.put_pixel(x, y, px);
        }
    }
    ImageData::from_rgb(&out)
}

/// Deterministic synthetic image used by the mock backends: a smooth
/// seed-keyed gradient with a few rectangles of contrasting color, so crops
/// of different regions differ.
pub fn synthesize_image(width: u32, height: u32, seed: u64) -> ImageData {
    let mut rng = Rng::new(seed);
    let base = [rng.next_below(256) as u8, rng.next_below(256) as u8, rng.next_below(256) as u8];
    let mut img: RgbImage = ImageBuffer::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let r = base[0].wrapping_add((x * 255 / width.max(1)) as u8);
            let g = base[1].wrapping_add((y * 255 / height.max(1)) as u8);
            let b = base[2].wrapping_add(((x ^ y) & 0xff) as u8);
            img.put_pixel(x, y, Rgb([r, g, b]));
        }
    }
    let rects = 2 + rng.next_below(3);
    for _ in 0..rects {
        let w = rng.next_range(2, (width / 2).max(3) as u64) as u32;
        let h = rng.next_range(2, (height / 2).max(3) as u64) as u32;
        let x0 = rng.next_below((width - w) as u64 + 1) as u32;
        let y0 = rng.next_below((height - h) as u64 + 1) as u32;
        let color =
            Rgb([rng.next_below(256) as u8, rng.next_below(256) as u8, rng.next_below(256) as u8]);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.put_pixel(x, y, color);
            }
        }
    }
    ImageData::from_rgb(&img).expect("encoding a fresh buffer cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize_image(32, 32, 7);
        let b = synthesize_image(32, 32, 7);
        assert_eq!(a.png, b.png);
        let c = synthesize_image(32, 32, 8);
        assert_ne!(a.png, c.png);
    }

    #[test]
    fn crop_has_box_dimensions() {
        let img = synthesize_image(32, 32, 1);
        let b = BBox::new(4, 6, 12, 16).unwrap();
        let crop = img.crop(&b).unwrap();
        assert_eq!((crop.width, crop.height), (8, 10));
    }

    #[test]
    fn crop_out_of_bounds_rejected() {
        let img = synthesize_image(16, 16, 1);
        assert!(img.crop(&BBox::new(8, 8, 20, 12).unwrap()).is_err());
    }

    #[test]
    fn masked_crop_zeroes_outside_mask() {
        let img = synthesize_image(16, 16, 2);
        let b = BBox::new(2, 2, 10, 10).unwrap();
        let mask = RasterMask::from_box(16, 16, &BBox::new(4, 4, 8, 8).unwrap());
        let masked = img.crop_masked(&b, &mask).unwrap();
        let pixels = masked.decode_rgb().unwrap();
        // Corner of the crop is outside the mask, center is inside.
        assert_eq!(*pixels.get_pixel(0, 0), Rgb([0, 0, 0]));
        let raw = img.crop(&b).unwrap().decode_rgb().unwrap();
        assert_eq!(*pixels.get_pixel(3, 3), *raw.get_pixel(3, 3));
    }

    #[test]
    fn png_round_trip_preserves_dimensions() {
        let img = synthesize_image(20, 12, 3);
        let reloaded = ImageData::from_png(img.png.clone()).unwrap();
        assert_eq!((reloaded.width, reloaded.height), (20, 12));
    }
}
