use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRaster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "raster {width}×{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(ImageRaster { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        ImageRaster { width, height, data }
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
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    pub fn zero(&mut self) {
        self.data.fill(0);
    }

    /// Copies the `w×h` rectangle at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<ImageRaster> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Input(format!("crop {w}×{h}+{x}+{y} outside {}×{} raster", self.width, self.height)));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let o = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[o..o + w * 3]);
        }
        Ok(ImageRaster { width: w, height: h, data })
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, w: usize, h: usize) -> ImageRaster {
        if w == self.width && h == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / w as f64;
        let sy = self.height as f64 / h as f64;
        let mut data = Vec::with_capacity(w * h * 3);
        for oy in 0..h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for ox in 0..w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..3 {
                    let p = |x: usize, y: usize| f64::from(self.data[(y * self.width + x) * 3 + c]);
                    let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                    let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                    data.push((top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        ImageRaster { width: w, height: h, data }
    }

    /// Planar `[3×H×W]` tensor with values in `[0, 1]`; an all-zero raster maps to zeros.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::from_parts(vec![3, self.height, self.width], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_resize_basics() {
        let mut img = ImageRaster::filled(8, 6, [10, 20, 30]);
        img.set_pixel(3, 2, [255, 0, 0]);
        let c = img.crop(3, 2, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0), [255, 0, 0]);
        assert_eq!(c.pixel(1, 1), [10, 20, 30]);
        assert!(img.crop(7, 0, 2, 1).is_err());

        let flat = ImageRaster::filled(5, 7, [1, 2, 3]);
        assert_eq!(flat.resize(11, 3), ImageRaster::filled(11, 3, [1, 2, 3]));
        assert_eq!(img.resize(8, 6), img);
    }

    #[test]
    fn tensor_layout_is_planar() {
        let mut img = ImageRaster::filled(2, 1, [0, 0, 0]);
        img.set_pixel(1, 0, [255, 51, 0]);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.2, 0.0, 0.0]);
    }
}
