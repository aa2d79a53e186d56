use std::path::Path;

use crate::error::{input_err, Error, Result};

/// Channel-major image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(input_err!(
                "image buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel-index coordinates, clamped at the border.
    pub fn sample_bilinear(&self, c: usize, y: f64, x: f64) -> f32 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
        let bottom = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Loads an 8-bit raster as a single-channel image scaled to `[0, 1]`.
    pub fn load_gray(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
        Image::from_vec(1, h as usize, w as usize, data)
    }

    /// Quantizes channel 0 to 8 bits and writes a PNG.
    pub fn save_gray_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_gray8())
            .ok_or_else(|| input_err!("image buffer size mismatch"))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.data[..self.height * self.width]
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Round-trips the image through 8-bit quantization.
    pub fn quantized(&self) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| f32::from((v.clamp(0.0, 1.0) * 255.0).round() as u8) / 255.0)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_is_exact_on_pixel_centers() {
        let img = Image::from_vec(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(img.sample_bilinear(0, 1.0, 0.0), 0.3);
        assert!((img.sample_bilinear(0, 0.5, 0.5) - 0.25).abs() < 1e-7);
    }

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_vec(1, 2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap().quantized();
        let p = dir.path().join("x.png");
        img.save_gray_png(&p).unwrap();
        assert_eq!(Image::load_gray(&p).unwrap(), img);
    }
}
