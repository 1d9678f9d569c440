//! Float RGB image in height-width-channel order with values in `[0, 1]`.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` samples, row-major, channels interleaved.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidInput(format!(
                "{} samples for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, width * height).flatten().collect();
        Image { width, height, data }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fails if any sample is outside `[0, 1]` or not finite.
    pub fn check_range(&self) -> Result<()> {
        match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidInput(format!("sample {i} = {} outside [0, 1]", self.data[i]))),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = self.index(x0, y);
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Image { width, height, data })
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Image {
        let row = self.width * 3;
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            data.extend_from_slice(&self.data[y * row..(y + 1) * row]);
        }
        Image { width: self.width, height: self.height, data }
    }

    /// Channel-planar copy (`3 x height x width`) for tensor construction.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            out[p] = px[0];
            out[plane + p] = px[1];
            out[2 * plane + p] = px[2];
        }
        out
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image { width: img.width() as usize, height: img.height() as usize, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches dimensions")
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    /// Bytes of the raw sample buffer, used for hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let data = (0..w * h * 3).map(|i| i as f32 / (w * h * 3) as f32).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(5, 3);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_eq!(img.flip_horizontal().pixel(4, 1), img.pixel(0, 1));
        assert_eq!(img.flip_vertical().pixel(2, 0), img.pixel(2, 2));
    }

    #[test]
    fn crop_and_bounds() {
        let img = ramp(6, 4);
        let c = img.crop(2, 1, 3, 2).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(2, 1));
        assert_eq!(c.pixel(2, 1), img.pixel(4, 2));
        assert!(img.crop(4, 0, 3, 2).is_err());
    }

    #[test]
    fn rgb8_round_trip() {
        let raw: Vec<u8> = (0..4 * 3 * 3).map(|v| (v * 7) as u8).collect();
        let rgb = RgbImage::from_raw(4, 3, raw).unwrap();
        assert_eq!(Image::from_rgb8(&rgb).to_rgb8(), rgb);
    }

    #[test]
    fn chw_layout() {
        let img = Image::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.to_chw(), vec![0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }
}
