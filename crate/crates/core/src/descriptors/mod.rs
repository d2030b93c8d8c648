//! L2-normalized patch descriptors sampled on a regular pixel grid.

mod cnn;
mod hog;

pub use cnn::{extract_backward, extract_trainable, ConvLayer, ExtractorCache, ExtractorParams};
pub use hog::{extract_fixed, HOG_DIM, PATCH};

use crate::error::{Error, Result};
use crate::io::ImageBuffer;

/// Pre-normalization vectors shorter than this map to the zero descriptor.
pub const NORM_EPS: f64 = 1e-8;

/// Grayscale image with samples in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Sample with clamp-to-edge addressing.
    pub fn clamped(&self, row: i64, col: i64) -> f64 {
        let r = row.clamp(0, self.height as i64 - 1) as usize;
        let c = col.clamp(0, self.width as i64 - 1) as usize;
        self.pixels[r * self.width + c]
    }
}

impl From<&ImageBuffer> for GrayImage {
    fn from(img: &ImageBuffer) -> Self {
        let g = img.to_gray();
        GrayImage {
            width: g.width(),
            height: g.height(),
            pixels: g.data().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }
}

/// Pixel positions `offset + stride * n` along each axis that fall inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleGrid {
    pub stride: i64,
    pub offset: i64,
    pub rows: usize,
    pub cols: usize,
}

impl SampleGrid {
    pub fn covering(width: usize, height: usize, stride: i64, offset: i64) -> Result<Self> {
        if stride <= 0 || offset < 0 {
            return Err(Error::config(format!(
                "sample grid needs stride > 0 and offset >= 0 (stride={stride}, offset={offset})"
            )));
        }
        let count = |extent: usize| {
            let e = extent as i64;
            if e <= offset {
                0
            } else {
                ((e - offset - 1) / stride + 1) as usize
            }
        };
        Ok(Self {
            stride,
            offset,
            rows: count(height),
            cols: count(width),
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel(&self, cell: [usize; 2]) -> [i64; 2] {
        [
            self.offset + self.stride * cell[0] as i64,
            self.offset + self.stride * cell[1] as i64,
        ]
    }

    pub fn positions(&self) -> impl Iterator<Item = [i64; 2]> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| self.pixel([r, c])))
    }
}

/// Grid of `dim`-dimensional descriptors, one per [`SampleGrid`] cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorField {
    pub grid: SampleGrid,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl DescriptorField {
    pub fn new(grid: SampleGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * dim {
            return Err(Error::shape(format!(
                "descriptor field {}x{}x{dim} needs {} values, got {}",
                grid.rows,
                grid.cols,
                grid.len() * dim,
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn rows(&self) -> usize {
        self.grid.rows
    }

    pub fn cols(&self) -> usize {
        self.grid.cols
    }

    pub fn get(&self, cell: [usize; 2]) -> &[f64] {
        let o = (cell[0] * self.grid.cols + cell[1]) * self.dim;
        &self.values[o..o + self.dim]
    }

    /// Cell whose sample position is exactly pixel `q`.
    pub fn cell_at(&self, q: [i64; 2]) -> Option<[usize; 2]> {
        let g = &self.grid;
        let mut out = [0usize; 2];
        let ext = [g.rows, g.cols];
        for a in 0..2 {
            let d = q[a] - g.offset;
            if d < 0 || d % g.stride != 0 {
                return None;
            }
            let n = (d / g.stride) as usize;
            if n >= ext[a] {
                return None;
            }
            out[a] = n;
        }
        Some(out)
    }
}

/// Normalize `v` in place; returns the pre-normalization norm.
pub fn l2_normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < NORM_EPS {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Gradient through `phi = v / |v|` given the normalized `phi` and `|v|`.
pub fn l2_normalize_backward(phi: &[f64], norm: f64, d_phi: &[f64], d_v: &mut [f64]) {
    if norm < NORM_EPS {
        d_v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let proj: f64 = phi.iter().zip(d_phi).map(|(a, b)| a * b).sum();
    for ((dv, p), dp) in d_v.iter_mut().zip(phi).zip(d_phi) {
        *dv = (dp - p * proj) / norm;
    }
}

/// Which descriptor extractor a pipeline uses.
#[derive(Clone, Debug, PartialEq)]
pub enum Extractor {
    /// Fixed oriented-gradient histograms.
    Fixed,
    /// Small convolutional stack with trainable weights.
    Trainable(ExtractorParams),
}

impl Extractor {
    pub fn params(&self) -> Option<&ExtractorParams> {
        match self {
            Extractor::Fixed => None,
            Extractor::Trainable(p) => Some(p),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ExtractorParams> {
        match self {
            Extractor::Fixed => None,
            Extractor::Trainable(p) => Some(p),
        }
    }

    pub fn extract(
        &self,
        image: &GrayImage,
        grid: SampleGrid,
    ) -> Result<(DescriptorField, Option<ExtractorCache>)> {
        match self {
            Extractor::Fixed => Ok((extract_fixed(image, grid)?, None)),
            Extractor::Trainable(p) => {
                let (field, cache) = extract_trainable(image, p, grid)?;
                Ok((field, Some(cache)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_extent() {
        let g = SampleGrid::covering(128, 64, 8, 4).unwrap();
        assert_eq!((g.rows, g.cols), (8, 16));
        assert_eq!(g.pixel([1, 2]), [12, 20]);
        assert_eq!(g.positions().count(), 128);
    }

    #[test]
    fn cell_lookup_requires_exact_sample() {
        let g = SampleGrid::covering(32, 32, 4, 2).unwrap();
        let f = DescriptorField::new(g, 1, vec![0.0; g.len()]).unwrap();
        assert_eq!(f.cell_at([2, 6]), Some([0, 1]));
        assert_eq!(f.cell_at([3, 6]), None);
        assert_eq!(f.cell_at([34, 6]), None);
        assert_eq!(f.cell_at([-2, 6]), None);
    }

    #[test]
    fn normalize_maps_tiny_vectors_to_zero() {
        let mut v = vec![1e-10, 0.0];
        l2_normalize(&mut v);
        assert_eq!(v, vec![0.0, 0.0]);
        let mut v = vec![3.0, 4.0];
        assert_eq!(l2_normalize(&mut v), 5.0);
        assert!((v[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn normalize_backward_is_orthogonal_to_phi() {
        let mut v = vec![0.3, -1.2, 0.7, 2.0];
        let norm = l2_normalize(&mut v);
        let d_phi = vec![1.0, 0.5, -0.25, 0.1];
        let mut d_v = vec![0.0; 4];
        l2_normalize_backward(&v, norm, &d_phi, &mut d_v);
        let dot: f64 = v.iter().zip(&d_v).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-15);
        // Upstream gradient along phi itself is annihilated.
        l2_normalize_backward(&v, norm, &v.clone(), &mut d_v);
        assert!(d_v.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let v0 = vec![0.3, -1.2, 0.7, 2.0];
        let w = [0.2, -0.4, 1.0, 0.3];
        let f = |v: &[f64]| {
            let mut p = v.to_vec();
            l2_normalize(&mut p);
            p.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut phi = v0.clone();
        let norm = l2_normalize(&mut phi);
        let mut d_v = vec![0.0; 4];
        l2_normalize_backward(&phi, norm, &w, &mut d_v);
        for j in 0..4 {
            let h = 1e-6;
            let mut a = v0.clone();
            let mut b = v0.clone();
            a[j] += h;
            b[j] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - d_v[j]).abs() < 1e-8, "{j}: {fd} vs {}", d_v[j]);
        }
    }
}
