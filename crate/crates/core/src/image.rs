//! Floating-point images in `[0, 1]` and lossless 8-bit PNG storage.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::reflect;
use crate::tensor::Tensor;

/// Largest latent downsampling factor any codec uses.
pub const MAX_CODEC_FACTOR: usize = 8;

/// Channel-major (`C×H×W`) image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageArray {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageArray {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).expect("valid fill")
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Pipeline-entry check: `H, W ≥ 16` and divisible by `2 · MAX_CODEC_FACTOR`.
    pub fn validate_pipeline_dims(&self) -> Result<()> {
        validate_pipeline_dims(self.height, self.width)
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Round-trips through 8-bit storage precision.
    pub fn quantize8(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = to_u8(*v) as f64 / 255.0);
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImageArray) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &ImageArray) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }

    /// `(1, C, H, W)` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone()).expect("consistent dims")
    }

    /// Batch `(N, C, H, W)` from equally shaped images.
    pub fn batch_tensor(images: &[&ImageArray]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * images.len());
        for img in images {
            if img.dims() != first.dims() {
                return Err(Error::Shape(format!("batch mixes {:?} and {:?}", img.dims(), first.dims())));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::new(&[images.len(), first.channels, first.height, first.width], data)
    }

    /// Item `i` of an `(N, C, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, i: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if i >= n {
            return Err(Error::OutOfBounds(format!("batch index {i} of {n}")));
        }
        let per = c * h * w;
        Self::new(c, h, w, t.data()[i * per..(i + 1) * per].to_vec())
    }

    /// Bilinear sample at fractional `(fy, fx)` with reflect boundary.
    pub fn sample_bilinear(&self, c: usize, fy: f64, fx: f64) -> f64 {
        let y0 = fy.floor();
        let x0 = fx.floor();
        let (ty, tx) = (fy - y0, fx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let (h, w) = (self.height, self.width);
        let p = |yy: isize, xx: isize| self.at(c, reflect(yy, h), reflect(xx, w));
        let mut v = (1.0 - ty) * (1.0 - tx) * p(y0, x0);
        if tx != 0.0 {
            v += (1.0 - ty) * tx * p(y0, x0 + 1);
        }
        if ty != 0.0 {
            v += ty * (1.0 - tx) * p(y0 + 1, x0);
            if tx != 0.0 {
                v += ty * tx * p(y0 + 1, x0 + 1);
            }
        }
        v
    }

    /// `out(y, x) = self(y + dy, x + dx)`, bilinear with reflect boundary.
    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        if dx == 0.0 && dy == 0.0 {
            return self.clone();
        }
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] = self.sample_bilinear(c, y as f64 + dy, x as f64 + dx);
                }
            }
        }
        out
    }

    /// One of the eight square symmetries: bit 0 mirrors columns, bit 1
    /// mirrors rows, bit 2 transposes (ignored unless the image is square).
    pub fn dihedral(&self, k: u8) -> Self {
        let (h, w) = (self.height, self.width);
        let transpose = k & 4 != 0 && h == w;
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = if transpose { (x, y) } else { (y, x) };
                    let sy = if k & 2 != 0 { h - 1 - sy } else { sy };
                    let sx = if k & 1 != 0 { w - 1 - sx } else { sx };
                    out.data[(c * h + y) * w + x] = self.at(c, sy, sx);
                }
            }
        }
        out
    }

    /// Output channel `i` is input channel `order[i]`.
    pub fn permute_channels(&self, order: &[usize]) -> Result<Self> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.channels).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!("{order:?} is not a permutation of {} channels", self.channels)));
        }
        let plane = self.height * self.width;
        let data = order.iter().flat_map(|&c| self.data[c * plane..(c + 1) * plane].iter().copied()).collect();
        Ok(Self { data, ..self.clone() })
    }

    /// Bilinear resize with half-pixel centers; edge samples clamp.
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let sy = h as f64 / new_h as f64;
        let sx = w as f64 / new_w as f64;
        let mut data = vec![0.0; self.channels * new_h * new_w];
        for c in 0..self.channels {
            for y in 0..new_h {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let ty = fy - y0 as f64;
                for x in 0..new_w {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let tx = fx - x0 as f64;
                    let v = (1.0 - ty) * ((1.0 - tx) * self.at(c, y0, x0) + tx * self.at(c, y0, x1))
                        + ty * ((1.0 - tx) * self.at(c, y1, x0) + tx * self.at(c, y1, x1));
                    data[(c * new_h + y) * new_w + x] = v;
                }
            }
        }
        Self { channels: self.channels, height: new_h, width: new_w, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(if self.channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let img_err = |e: png::EncodingError| Error::Image { path: path.to_path_buf(), msg: e.to_string() };
        let mut writer = enc.write_header().map_err(img_err)?;
        let hw = self.height * self.width;
        let mut bytes = vec![0u8; self.channels * hw];
        for p in 0..hw {
            for c in 0..self.channels {
                bytes[p * self.channels + c] = to_u8(self.data[c * hw + p]);
            }
        }
        writer.write_image_data(&bytes).map_err(img_err)?;
        writer.finish().map_err(img_err)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let img_err = |msg: String| Error::Image { path: path.to_path_buf(), msg };
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| img_err(e.to_string()))?;
        let size = reader.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let (src_ch, channels) = match info.color_type {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            other => return Err(img_err(format!("unsupported color type {other:?}"))),
        };
        let hw = h * w;
        let mut data = vec![0.0; channels * hw];
        for p in 0..hw {
            for c in 0..channels {
                data[c * hw + p] = buf[p * src_ch + c] as f64 / 255.0;
            }
        }
        Self::new(channels, h, w, data)
    }
}

pub fn validate_pipeline_dims(height: usize, width: usize) -> Result<()> {
    let q = 2 * MAX_CODEC_FACTOR;
    if height < 16 || width < 16 || !height.is_multiple_of(q) || !width.is_multiple_of(q) {
        return Err(Error::InvalidArgument(format!("image size {height}x{width} must be at least 16x16 and divisible by {q}")));
    }
    Ok(())
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_channels_and_nan() {
        assert!(ImageArray::new(2, 4, 4, vec![0.0; 32]).is_err());
        let mut d = vec![0.0; 16];
        d[3] = f64::NAN;
        assert!(ImageArray::new(1, 4, 4, d).is_err());
    }

    #[test]
    fn symmetries_are_distinct_and_invertible() {
        let img = ImageArray::new(3, 4, 4, (0..48).map(|v| v as f64 / 48.0).collect()).unwrap();
        let all: Vec<ImageArray> = (0..8).map(|k| img.dihedral(k)).collect();
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(all[i], all[j], "{i} vs {j}");
            }
        }
        for k in 0..4 {
            assert_eq!(img.dihedral(k).dihedral(k), img);
        }
        assert_eq!(img.dihedral(4).at(1, 0, 3), img.at(1, 3, 0));
        let p = img.permute_channels(&[2, 0, 1]).unwrap();
        assert_eq!(p.at(0, 1, 2), img.at(2, 1, 2));
        assert_eq!(p.permute_channels(&[1, 2, 0]).unwrap(), img);
        assert!(img.permute_channels(&[0, 0, 1]).is_err());
    }

    #[test]
    fn pipeline_dims() {
        assert!(validate_pipeline_dims(32, 48).is_ok());
        assert!(validate_pipeline_dims(8, 8).is_err());
        assert!(validate_pipeline_dims(24, 32).is_err());
    }

    #[test]
    fn png_roundtrip_is_lossless_on_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 16 * 16).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let img = ImageArray::new(3, 16, 16, data).unwrap();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageArray::load_png(&p).unwrap(), img);
        let gray = ImageArray::filled(1, 16, 16, 0.5).quantize8();
        gray.save_png(&p).unwrap();
        assert_eq!(ImageArray::load_png(&p).unwrap(), gray);
    }

    #[test]
    fn integer_translation_shifts() {
        let data: Vec<f64> = (0..16 * 16).map(|i| i as f64 / 256.0).collect();
        let img = ImageArray::new(1, 16, 16, data).unwrap();
        let t = img.translate(1.0, 0.0);
        assert_eq!(t.at(0, 3, 4), img.at(0, 3, 5));
        let half = img.translate(0.5, 0.0);
        assert!((half.at(0, 3, 4) - 0.5 * (img.at(0, 3, 4) + img.at(0, 3, 5))).abs() < 1e-12);
    }
}
