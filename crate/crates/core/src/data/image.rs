use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Channel-major (CHW) single-precision raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Data(format!(
                "empty image {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Data(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    /// Largest |m[i][j] - m[j][i]| over all channels; `None` for non-square images.
    pub fn asymmetry(&self) -> Option<(f32, usize, usize)> {
        if !self.is_square() {
            return None;
        }
        let mut worst = (0.0f32, 0, 0);
        for c in 0..self.channels {
            for i in 0..self.height {
                for j in (i + 1)..self.width {
                    let d = (self.at(c, i, j) - self.at(c, j, i)).abs();
                    if d > worst.0 {
                        worst = (d, i, j);
                    }
                }
            }
        }
        Some(worst)
    }

    /// Stacks images into a `[B, C, H, W]` tensor.
    pub fn batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Data("cannot batch zero images".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if (img.channels, img.height, img.width) != (c, h, w) {
                return Err(Error::Data(format!(
                    "mixed image sizes in batch: {}x{}x{} vs {c}x{h}x{w}",
                    img.channels, img.height, img.width
                )));
            }
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(&[images.len(), c, h, w], data)
    }
}
