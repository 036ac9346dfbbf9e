use std::path::Path;

use image::{imageops::FilterType, DynamicImage, RgbImage};
use ndarray::{Array3, Axis};

use crate::error::{Error, Result};

/// A floating-point image stored channel-major as `(channels, height, width)`
/// with every value in the canonical `[-1, 1]` range.
///
/// Thermal images carry one channel, visible images three. Networks always
/// see three channels; [`ImageTensor::to_rgb`] replicates a single channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

pub const VALUE_MIN: f64 = -1.0;
pub const VALUE_MAX: f64 = 1.0;

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("expected 1 or 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("image has an empty side"));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !(VALUE_MIN..=VALUE_MAX).contains(*v))
        {
            return Err(Error::invalid(format!(
                "pixel value {v} outside [{VALUE_MIN}, {VALUE_MAX}]"
            )));
        }
        Ok(ImageTensor { data })
    }

    /// Builds a tensor by clamping into range; NaN maps to 0.
    pub fn from_clamped(mut data: Array3<f64>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(VALUE_MIN, VALUE_MAX) });
        ImageTensor::new(data)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        ImageTensor::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn same_size(&self, other: &ImageTensor) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }

    /// Three-channel view of the image; single-channel images are replicated.
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels() == 3 {
            return self.clone();
        }
        let plane = self.data.index_axis(Axis(0), 0);
        let mut out = Array3::zeros((3, self.height(), self.width()));
        for mut ch in out.outer_iter_mut() {
            ch.assign(&plane);
        }
        ImageTensor { data: out }
    }

    /// Quantizes to 8-bit interleaved RGB, row-major (`H*W*3` bytes).
    pub fn to_rgb8_bytes(&self) -> Vec<u8> {
        let rgb = self.to_rgb();
        let (_, h, w) = rgb.data.dim();
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.push(to_u8(rgb.data[[c, y, x]]));
                }
            }
        }
        out
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        let bytes = self.to_rgb8_bytes();
        RgbImage::from_raw(self.width() as u32, self.height() as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = DynamicImage::ImageRgb8(self.to_rgb_image());
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Decodes an 8-bit image, resizes it bilinearly to `size`×`size` and
    /// rescales to `[-1, 1]`. `channels` selects grayscale (1) or RGB (3).
    pub fn load(path: &Path, size: usize, channels: usize) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Load {
                path: path.to_path_buf(),
                reason: "file not found".into(),
            });
        }
        let img = image::open(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_dynamic(&img, size, channels))
    }

    /// Like [`ImageTensor::load`] but keeps the native resolution.
    pub fn load_native(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let size = (img.width(), img.height());
        Ok(Self::from_dynamic_sized(&img, size, channels))
    }

    pub fn from_dynamic(img: &DynamicImage, size: usize, channels: usize) -> Self {
        Self::from_dynamic_sized(img, (size as u32, size as u32), channels)
    }

    fn from_dynamic_sized(img: &DynamicImage, (w, h): (u32, u32), channels: usize) -> Self {
        let resized = if img.width() == w && img.height() == h {
            img.clone()
        } else {
            img.resize_exact(w, h, FilterType::Triangle)
        };
        let (w, h) = (w as usize, h as usize);
        let data = if channels == 1 {
            let gray = resized.to_luma8();
            Array3::from_shape_fn((1, h, w), |(_, y, x)| {
                from_u8(gray.get_pixel(x as u32, y as u32)[0])
            })
        } else {
            let rgb = resized.to_rgb8();
            Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                from_u8(rgb.get_pixel(x as u32, y as u32)[c])
            })
        };
        ImageTensor { data }
    }
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(VALUE_MIN, VALUE_MAX) + 1.0) * 127.5).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        let data = Array3::from_elem((3, 2, 2), 1.5);
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn rejects_bad_channel_count() {
        assert!(ImageTensor::filled(2, 4, 4, 0.0).is_err());
    }

    #[test]
    fn replication_copies_the_plane() {
        let mut data = Array3::zeros((1, 2, 3));
        data[[0, 1, 2]] = 0.5;
        let t = ImageTensor::new(data).unwrap().to_rgb();
        assert_eq!(t.channels(), 3);
        for c in 0..3 {
            assert_eq!(t.data()[[c, 1, 2]], 0.5);
        }
    }

    #[test]
    fn u8_round_trip_is_exact() {
        for v in 0..=255u8 {
            assert_eq!(to_u8(from_u8(v)), v);
        }
    }
}
