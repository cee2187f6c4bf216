//! `H×W×C` rasters with float intensities, and 8-bit PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved raster, intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<S> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<S>,
}

impl<S: Scalar> Image<S> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Image::new",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: S) -> Self {
        Image { height, width, channels, data: vec![v; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> S {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: S) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[S] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[H*W, C]` matrix view for the tape.
    pub fn to_rows(&self) -> Tensor<S> {
        Tensor::from_parts(&[self.height * self.width, self.channels], self.data.clone())
    }

    pub fn from_rows(height: usize, width: usize, t: &Tensor<S>) -> Result<Self> {
        let channels = t.len() / (height * width).max(1);
        Image::new(height, width, channels, t.data().to_vec())
    }

    pub fn cast<T: Scalar>(&self) -> Image<T> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| T::of(v.as_f64())).collect(),
        }
    }

    /// Quantize to 8 bits per channel (values clamped to `[0, 1]`).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| S::of(b as f64 / 255.0)).collect();
        Image::new(height, width, channels, data)
    }

    /// Write as 8-bit PNG (1 channel: grayscale, 3 channels: RGB).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel PNG"))),
        };
        image::save_buffer(path, &self.to_u8(), self.width as u32, self.height as u32, color)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Read an 8-bit PNG as RGB.
    pub fn load_rgb(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let rgb = img.to_rgb8();
        Image::from_u8(rgb.height() as usize, rgb.width() as usize, 3, rgb.as_raw())
    }
}

/// Write a label raster (values stored verbatim) as an 8-bit grayscale PNG.
pub fn save_label_png(path: &Path, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    image::save_buffer(path, labels, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let bytes: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::<f32>::from_u8(4, 5, 3, &bytes).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::<f32>::load_rgb(&path).unwrap();
        assert_eq!(back.to_u8(), bytes);
    }
}
