use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::Tensor;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Raster({}x{})", self.width, self.height)
    }
}

/// Inclusive-exclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

impl Raster {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Raster { width, height, data }
    }

    pub fn from_rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{} bytes for a {width}x{height} RGB raster",
                data.len()
            )));
        }
        Ok(Raster { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Maps a normalized box to pixel bounds by rounding each edge, then
    /// widens sub-pixel results to at least `min` pixels inside the image.
    pub fn pixel_rect(&self, b: &BBox, min: usize) -> PixelRect {
        let c = b.clip();
        let to_px = |v: f64, n: usize| ((v * n as f64).round() as usize).min(n);
        let (mut x0, mut x1) = (to_px(c.x_min, self.width), to_px(c.x_max, self.width));
        let (mut y0, mut y1) = (to_px(c.y_min, self.height), to_px(c.y_max, self.height));
        widen(&mut x0, &mut x1, min, self.width);
        widen(&mut y0, &mut y1, min, self.height);
        PixelRect { x0, y0, x1, y1 }
    }

    pub fn crop(&self, r: PixelRect) -> Raster {
        let (w, h) = (r.width(), r.height());
        let mut data = Vec::with_capacity(w * h * 3);
        for y in r.y0..r.y1 {
            let start = (y * self.width + r.x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Raster { width: w, height: h, data }
    }

    pub fn mirror(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Area-averaging resample; exact block means for integer factors.
    pub fn downscale_area(&self, width: usize, height: usize) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xw = area_weights(self.width, width);
        let yw = area_weights(self.height, height);
        let mut rows = vec![0.0f64; self.height * width * 3];
        for y in 0..self.height {
            for (ox, taps) in xw.iter().enumerate() {
                for c in 0..3 {
                    let v: f64 = taps
                        .iter()
                        .map(|&(sx, w)| w * f64::from(self.data[(y * self.width + sx) * 3 + c]))
                        .sum();
                    rows[(y * width + ox) * 3 + c] = v;
                }
            }
        }
        let mut data = vec![0u8; width * height * 3];
        for (oy, taps) in yw.iter().enumerate() {
            for ox in 0..width {
                for c in 0..3 {
                    let v: f64 = taps.iter().map(|&(sy, w)| w * rows[(sy * width + ox) * 3 + c]).sum();
                    data[(oy * width + ox) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Raster { width, height, data }
    }

    fn sample_bilinear(&self, fx: f64, fy: f64, c: usize) -> f64 {
        let fx = fx.clamp(0.0, (self.width - 1) as f64);
        let fy = fy.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let p = |x: usize, y: usize| f64::from(self.data[(y * self.width + x) * 3 + c]);
        let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
        let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Half-pixel-centered bilinear resample into a caller-provided sink.
    fn resample(&self, width: usize, height: usize, mut sink: impl FnMut(usize, usize, usize, f64)) {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..3 {
                    sink(x, y, c, self.sample_bilinear(fx, fy, c));
                }
            }
        }
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut data = vec![0u8; width * height * 3];
        self.resample(width, height, |x, y, c, v| {
            data[(y * width + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        });
        Raster { width, height, data }
    }

    /// `(3, H, W)` tensor with values `v / 255 - 0.5`; bilinear resample when
    /// the requested size differs.
    pub fn to_tensor(&self, width: usize, height: usize) -> Tensor<f32> {
        let plane = width * height;
        let mut data = vec![0f32; 3 * plane];
        if width == self.width && height == self.height {
            for (i, px) in self.data.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = f32::from(px[c]) / 255.0 - 0.5;
                }
            }
        } else {
            self.resample(width, height, |x, y, c, v| {
                data[c * plane + y * width + x] = (v / 255.0 - 0.5) as f32;
            });
        }
        Tensor::new(vec![3, height, width], data).expect("sized above")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Raster> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Image(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image(format!(
                "expected 8-bit RGB, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Raster::from_rgb(info.width as usize, info.height as usize, buf)
    }
}

fn widen(lo: &mut usize, hi: &mut usize, min: usize, n: usize) {
    let min = min.min(n);
    if *hi < *lo + min {
        let need = *lo + min - *hi;
        let grow_hi = need.min(n - *hi);
        *hi += grow_hi;
        *lo -= need - grow_hi;
    }
}

/// For each output cell, source indices and their fractional coverage
/// weights (normalized to sum to 1).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut s = a.floor() as usize;
            while (s as f64) < b && s < src {
                let cover = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((s, cover / scale));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

/// Highres raster plus its detector-resolution downscale. A normalized box
/// denotes the same region in both.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub highres: Raster,
    pub lowres: Raster,
}

impl FramePair {
    pub fn new(highres: Raster, lowres_size: usize) -> Self {
        let lowres = highres.downscale_area(lowres_size, lowres_size);
        FramePair { highres, lowres }
    }

    /// Highres pixels per lowres pixel, horizontally and vertically.
    pub fn scale(&self) -> (f64, f64) {
        (
            self.highres.width() as f64 / self.lowres.width() as f64,
            self.highres.height() as f64 / self.lowres.height() as f64,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Raster {
        let mut r = Raster::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                r.set_pixel(x, y, [(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        r
    }

    #[test]
    fn integer_downscale_is_block_mean() {
        let r = gradient(8, 8);
        let d = r.downscale_area(2, 2);
        let mut sum = 0u32;
        for y in 0..4 {
            for x in 0..4 {
                sum += u32::from(r.pixel(x, y)[0]);
            }
        }
        assert_eq!(u32::from(d.pixel(0, 0)[0]), (f64::from(sum) / 16.0).round() as u32);
    }

    #[test]
    fn png_round_trip() {
        let r = gradient(13, 7);
        assert_eq!(Raster::decode_png(&r.encode_png().unwrap()).unwrap(), r);
    }

    #[test]
    fn pixel_rect_rounding_and_minimum() {
        let r = Raster::filled(512, 512, [0; 3]);
        let q = r.pixel_rect(&BBox::new(0.0, 0.0, 0.25, 0.25), 2);
        assert_eq!((q.width(), q.height()), (128, 128));
        let tiny = r.pixel_rect(&BBox::new(0.9995, 0.5, 1.0, 0.5001), 2);
        assert_eq!((tiny.width(), tiny.height()), (2, 2));
        assert_eq!(tiny.x1, 512);
    }

    #[test]
    fn mirror_twice_is_identity() {
        let r = gradient(9, 4);
        assert_eq!(r.mirror().mirror(), r);
        assert_eq!(r.mirror().pixel(0, 1), r.pixel(8, 1));
    }

    #[test]
    fn same_size_tensor_is_plain_normalization() {
        let r = gradient(4, 3);
        let t = r.to_tensor(4, 3);
        assert_eq!(t.shape(), &[3, 3, 4]);
        assert_eq!(t.data()[12 + 5], f32::from(r.pixel(1, 1)[1]) / 255.0 - 0.5);
    }
}
