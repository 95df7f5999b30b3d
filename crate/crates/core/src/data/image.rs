use crate::numerics::Tensor;

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[H, W, 3]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.data.iter().map(|v| *v as f32 / 255.0).collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("length matches shape")
    }

    /// Appends this image's normalized values to `out` (for batching).
    pub fn extend_normalized(&self, out: &mut Vec<f32>) {
        out.extend(self.data.iter().map(|v| *v as f32 / 255.0));
    }

    /// Bilinear resampling with pixel centers aligned.
    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = RgbImage::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
        for y in 0..height {
            let fy = clamp((y as f64 + 0.5) * sy - 0.5, self.height);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = clamp((x as f64 + 0.5) * sx - 0.5, self.width);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                let (a, b) = (self.pixel(x0, y0), self.pixel(x1, y0));
                let (c, d) = (self.pixel(x0, y1), self.pixel(x1, y1));
                let o = (y * width + x) * 3;
                for ch in 0..3 {
                    let top = a[ch] as f64 * (1.0 - tx) + b[ch] as f64 * tx;
                    let bot = c[ch] as f64 * (1.0 - tx) + d[ch] as f64 * tx;
                    out.data[o + ch] = (top * (1.0 - ty) + bot * ty).round() as u8;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_scaling() {
        let mut img = RgbImage::new(2, 1);
        img.data = vec![0, 255, 51, 1, 2, 3];
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[2], 0.2);
    }

    #[test]
    fn resize_constant_image() {
        let mut img = RgbImage::new(5, 7);
        img.data.iter_mut().for_each(|v| *v = 77);
        let r = img.resize(3, 11);
        assert_eq!((r.width, r.height), (3, 11));
        assert!(r.data.iter().all(|v| *v == 77));
        assert_eq!(img.resize(5, 7), img);
    }
}
