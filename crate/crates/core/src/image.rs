//! Channel-major feature maps. RGB images are feature maps with three
//! channels holding values in [0, 1].

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `channels × height × width`, row-major within each channel.
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Solid RGB image.
    pub fn solid(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut m = Self::zeros(3, height, width);
        for (c, v) in rgb.iter().enumerate() {
            m.channel_mut(c).fill(*v);
        }
        m
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.at(0, y, x), self.at(1, y, x), self.at(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.iter().enumerate() {
            let i = self.idx(c, y, x);
            self.data[i] = *v;
        }
    }

    /// Copy of the window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<FeatureMap> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Contract(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = FeatureMap::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let src = self.idx(c, y0 + y, x0);
                let dst = out.idx(c, y, 0);
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Add `patch` into the window at `(y0, x0)`; the adjoint of [`crop`](Self::crop).
    pub fn add_patch(&mut self, y0: usize, x0: usize, patch: &FeatureMap) {
        for c in 0..self.channels {
            for y in 0..patch.height {
                let dst = self.idx(c, y0 + y, x0);
                let src = patch.idx(c, y, 0);
                for x in 0..patch.width {
                    self.data[dst + x] += patch.data[src + x];
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn mean_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }

    pub fn mse(&self, other: &FeatureMap) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }

    /// Peak signal-to-noise ratio for signals in [0, 1].
    pub fn psnr(&self, other: &FeatureMap) -> f64 {
        let mse = self.mse(other);
        if mse <= 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mirror along the horizontal axis (columns reversed).
    pub fn flip_horizontal(&self) -> FeatureMap {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = out.idx(c, y, 0);
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    /// Box-filter downsample to `size × size` (area average; sizes need not divide).
    pub fn resize_area(&self, size: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.channels, size, size);
        let sy = self.height as f64 / size as f64;
        let sx = self.width as f64 / size as f64;
        for c in 0..self.channels {
            for oy in 0..size {
                let y0 = oy as f64 * sy;
                let y1 = y0 + sy;
                for ox in 0..size {
                    let x0 = ox as f64 * sx;
                    let x1 = x0 + sx;
                    let mut acc = 0.0;
                    let mut area = 0.0;
                    let mut y = y0.floor() as usize;
                    while (y as f64) < y1 && y < self.height {
                        let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                        let mut x = x0.floor() as usize;
                        while (x as f64) < x1 && x < self.width {
                            let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                            acc += wy * wx * self.at(c, y, x);
                            area += wy * wx;
                            x += 1;
                        }
                        y += 1;
                    }
                    let i = out.idx(c, oy, ox);
                    out.data[i] = acc / area.max(1e-12);
                }
            }
        }
        out
    }

    /// Quantize an RGB map to interleaved 8-bit samples.
    pub fn to_rgb8(&self) -> Vec<u8> {
        assert_eq!(self.channels, 3, "to_rgb8 expects three channels");
        let mut out = Vec::with_capacity(self.plane() * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push(quantize(self.at(c, y, x)));
                }
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> FeatureMap {
        assert_eq!(bytes.len(), height * width * 3);
        let mut m = FeatureMap::zeros(3, height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let i = m.idx(c, y, x);
                    m.data[i] = bytes[(y * width + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        m
    }

    /// Round-trip through 8-bit quantization.
    pub fn quantized(&self) -> FeatureMap {
        FeatureMap::from_rgb8(self.height, self.width, &self.to_rgb8())
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an RGB map as an 8-bit PNG.
pub fn write_png(path: &Path, img: &FeatureMap) -> Result<()> {
    write_png_bytes(path, img.width, img.height, &img.to_rgb8(), png::ColorType::Rgb)
}

/// Write a single-channel map in [0, 1] as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|v| quantize(*v)).collect();
    write_png_bytes(path, width, height, &bytes, png::ColorType::Grayscale)
}

fn write_png_bytes(
    path: &Path,
    width: usize,
    height: usize,
    bytes: &[u8],
    color: png::ColorType,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Read an 8-bit RGB (or RGBA, alpha dropped) PNG.
pub fn read_png(path: &Path) -> Result<FeatureMap> {
    let png_err = |m: String| Error::Png {
        path: path.to_path_buf(),
        message: m,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| png_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_err(format!("unsupported color type {other:?}"))),
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in buf[..w * h * stride].chunks(stride) {
        rgb.extend_from_slice(&px[..3]);
    }
    Ok(FeatureMap::from_rgb8(h, w, &rgb))
}

/// Tile equally sized RGB images into a grid with `cols` columns.
pub fn contact_sheet(images: &[FeatureMap], cols: usize, background: [f64; 3]) -> FeatureMap {
    assert!(!images.is_empty() && cols > 0);
    let (h, w) = (images[0].height, images[0].width);
    let rows = images.len().div_ceil(cols);
    let mut sheet = FeatureMap::solid(rows * h, cols * w, background);
    for (k, img) in images.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        for ch in 0..3 {
            for y in 0..h {
                let dst = sheet.idx(ch, r * h + y, c * w);
                let src = img.idx(ch, y, 0);
                sheet.data[dst..dst + w].copy_from_slice(&img.data[src..src + w]);
            }
        }
    }
    sheet
}
