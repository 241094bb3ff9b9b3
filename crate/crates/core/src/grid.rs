//! Row-major real-valued image grids with 8-bit PNG persistence.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self { width, height, data }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn check_same_shape(&self, other: &ImageGrid) -> Result<(), GridError> {
        if self.width != other.width || self.height != other.height {
            return Err(GridError::ShapeMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// 1.0 where the value is at least `threshold`, else 0.0.
    pub fn binarized(&self, threshold: f64) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Intersection over union of the two masks binarized at 0.5.
    /// Two empty masks have IoU 1.
    pub fn iou(&self, other: &ImageGrid) -> Result<f64, GridError> {
        self.check_same_shape(other)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.data.iter().zip(&other.data) {
            let (a, b) = (*a >= 0.5, *b >= 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Fraction of pixels whose binarized values agree.
    pub fn binary_agreement(&self, other: &ImageGrid) -> Result<f64, GridError> {
        self.check_same_shape(other)?;
        let same = self.data.iter().zip(&other.data).filter(|(a, b)| (**a >= 0.5) == (**b >= 0.5)).count();
        Ok(same as f64 / self.data.len().max(1) as f64)
    }

    /// Writes an 8-bit grayscale PNG with value `round(255 * clamp(v, 0, 1))`.
    pub fn save_png(&self, path: &Path) -> Result<(), GridError> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size matches");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, GridError> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        Ok(Self { width: w as usize, height: h as usize, data: img.pixels().map(|p| p.0[0] as f64 / 255.0).collect() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_and_agreement() {
        let a = ImageGrid::from_fn(4, 4, |r, _| if r < 2 { 1.0 } else { 0.0 });
        let b = ImageGrid::from_fn(4, 4, |r, _| if r < 3 { 0.9 } else { 0.1 });
        assert!((a.iou(&b).unwrap() - 8.0 / 12.0).abs() < 1e-15);
        assert!((a.binary_agreement(&b).unwrap() - 12.0 / 16.0).abs() < 1e-15);
        assert_eq!(ImageGrid::zeros(3, 3).iou(&ImageGrid::zeros(3, 3)).unwrap(), 1.0);
        assert!(a.iou(&ImageGrid::zeros(3, 4)).is_err());
    }

    #[test]
    fn png_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let g = ImageGrid::from_fn(5, 3, |r, c| (r * 5 + c) as f64 / 14.0);
        g.save_png(&p).unwrap();
        let back = ImageGrid::load_png(&p).unwrap();
        assert_eq!((back.width, back.height), (5, 3));
        for (a, b) in g.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
