//! Floating-point rasters with intensities in `[0, 1]`.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image must be at least 2x2, got {height}x{width}")]
    TooSmall { height: usize, width: usize },
    #[error("unsupported channel count {0}: expected 1 or 3")]
    Channels(usize),
    #[error("buffer holds {found} values, expected {expected}")]
    BufferSize { expected: usize, found: usize },
    #[error("intensity at index {index} is {value}, outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("failed to read or write {path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Row-major `(row, column, channel)` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<(), ImageError> {
    if height < 2 || width < 2 {
        return Err(ImageError::TooSmall { height, width });
    }
    if channels != 1 && channels != 3 {
        return Err(ImageError::Channels(channels));
    }
    Ok(())
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_dims(height, width, channels)?;
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(ImageError::BufferSize {
                expected,
                found: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from values assumed valid; callers guarantee the range.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Single-channel image from a per-pixel closure; values are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self, ImageError> {
        check_dims(height, width, 1)?;
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Ok(Self::from_raw(height, width, 1, data))
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Mean over channels; a no-op clone for grayscale input.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect();
        Image::from_raw(self.height, self.width, 1, data)
    }

    /// Area-averaging resample: each output pixel is the overlap-weighted mean
    /// of the input pixels its footprint covers.
    pub fn resize_area(&self, height: usize, width: usize) -> Result<Image, ImageError> {
        check_dims(height, width, 1)?;
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let rows = area_weights(self.height, height);
        let cols = area_weights(self.width, width);
        let ch = self.channels;
        let mut data = vec![0.0; height * width * ch];
        for (r, rw) in rows.iter().enumerate() {
            for (c, cw) in cols.iter().enumerate() {
                let out = &mut data[(r * width + c) * ch..(r * width + c + 1) * ch];
                for &(sr, wr) in rw {
                    for &(sc, wc) in cw {
                        let w = wr * wc;
                        for (k, o) in out.iter_mut().enumerate() {
                            *o += w * self.get(sr, sc, k);
                        }
                    }
                }
                for o in out.iter_mut() {
                    *o = o.clamp(0.0, 1.0);
                }
            }
        }
        Ok(Image::from_raw(height, width, ch, data))
    }

    /// Separable Gaussian blur with edge clamping.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let (h, w, ch) = self.shape();
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

        let mut tmp = vec![0.0; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                for k in 0..ch {
                    tmp[(r * w + c) * ch + k] = kernel
                        .iter()
                        .enumerate()
                        .map(|(i, kv)| kv * self.get(r, clampi(c as isize + i as isize - radius, w), k))
                        .sum();
                }
            }
        }
        let mut data = vec![0.0; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                for k in 0..ch {
                    let v: f64 = kernel
                        .iter()
                        .enumerate()
                        .map(|(i, kv)| kv * tmp[(clampi(r as isize + i as isize - radius, h) * w + c) * ch + k])
                        .sum();
                    data[(r * w + c) * ch + k] = v.clamp(0.0, 1.0);
                }
            }
        }
        Image::from_raw(h, w, ch, data)
    }

    /// Loads a PNG (or any format the decoder knows) as grayscale or RGB.
    pub fn load(path: &Path) -> Result<Image, ImageError> {
        let codec = |source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        };
        let img = image::open(path).map_err(codec)?;
        let (data, ch, w, h) = if img.color().has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            (rgb.into_raw(), 3, w, h)
        } else {
            let gray = img.to_luma8();
            let (w, h) = gray.dimensions();
            (gray.into_raw(), 1, w, h)
        };
        let data = data.into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(h as usize, w as usize, ch, data)
    }

    /// 8-bit PNG: grayscale for one channel, RGB for three.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.to_u8();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }
}

/// For each output cell, the input indices it overlaps and their normalized weights.
fn area_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let mut cells = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < input {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push((i, overlap / scale));
                }
                i += 1;
            }
            cells
        })
        .collect()
}

/// Corner-aligned pixel index to normalized coordinate.
#[inline]
pub fn pixel_to_norm(index: f64, size: usize) -> f64 {
    -1.0 + 2.0 * index / (size - 1) as f64
}

/// Normalized coordinate to fractional pixel index.
#[inline]
pub fn norm_to_pixel(coord: f64, size: usize) -> f64 {
    (coord + 1.0) * (size - 1) as f64 / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(matches!(Image::new(1, 4, 1, vec![0.0; 4]), Err(ImageError::TooSmall { .. })));
        assert!(matches!(Image::new(2, 2, 2, vec![0.0; 8]), Err(ImageError::Channels(2))));
        assert!(matches!(Image::new(2, 2, 1, vec![0.0; 3]), Err(ImageError::BufferSize { .. })));
        assert!(matches!(
            Image::new(2, 2, 1, vec![0.0, 1.5, 0.0, 0.0]),
            Err(ImageError::OutOfRange { index: 1, .. })
        ));
        assert!(Image::new(2, 2, 1, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn area_resize_averages_blocks() {
        let img = Image::from_fn(4, 4, |r, c| (r * 4 + c) as f64 / 15.0).unwrap();
        let small = img.resize_area(2, 2).unwrap();
        let expected = (0.0 + 1.0 + 4.0 + 5.0) / 4.0 / 15.0;
        assert!((small.get(0, 0, 0) - expected).abs() < 1e-15);
        // Non-integer ratio keeps the mean.
        let odd = img.resize_area(3, 3).unwrap();
        let mean = |i: &Image| i.data().iter().sum::<f64>() / i.data().len() as f64;
        assert!((mean(&odd) - mean(&img)).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(8, 8, 1, 0.4).unwrap();
        let b = img.gaussian_blur(2.0);
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_fn(3, 5, |r, c| ((r + c) % 3) as f64 / 2.0).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back.shape(), (3, 5, 1));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pixel_convention_is_corner_aligned() {
        assert_eq!(pixel_to_norm(0.0, 5), -1.0);
        assert_eq!(pixel_to_norm(4.0, 5), 1.0);
        assert_eq!(pixel_to_norm(2.0, 5), 0.0);
        assert_eq!(norm_to_pixel(1.0, 5), 4.0);
    }
}
