//! Fixed oriented-gradient histogram descriptor.
//!
//! A 16x16 patch centred on the sample is split into 4x4 cells of 4x4
//! pixels; each cell accumulates gradient magnitude into 8 signed orientation
//! bins with linear interpolation between neighbouring bins. The 128 entries
//! are square-rooted and L2-normalized.

use std::f64::consts::PI;

use super::{l2_normalize, DescriptorField, GrayImage, SampleGrid};
use crate::error::{Error, Result};

pub const PATCH: usize = 16;
const CELLS: usize = 4;
const BINS: usize = 8;
pub const HOG_DIM: usize = CELLS * CELLS * BINS;

fn smooth(image: &GrayImage) -> GrayImage {
    // Separable binomial [1 4 6 4 1] / 16, clamp-to-edge.
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = (image.width, image.height);
    let mut tmp = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = K
                .iter()
                .enumerate()
                .map(|(t, k)| k * image.clamped(r as i64, c as i64 + t as i64 - 2))
                .sum();
        }
    }
    let tmp = GrayImage {
        width: w,
        height: h,
        pixels: tmp,
    };
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = K
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp.clamped(r as i64 + t as i64 - 2, c as i64))
                .sum();
        }
    }
    GrayImage {
        width: w,
        height: h,
        pixels: out,
    }
}

/// Per-bin integral images of orientation-binned gradient magnitude.
struct BinnedGradients {
    width: usize,
    height: usize,
    // BINS planes of (height + 1) x (width + 1)
    integral: Vec<f64>,
}

impl BinnedGradients {
    fn new(image: &GrayImage) -> Self {
        let s = smooth(image);
        let (w, h) = (s.width, s.height);
        let mut planes = vec![0.0; BINS * w * h];
        for r in 0..h {
            for c in 0..w {
                let (ri, ci) = (r as i64, c as i64);
                let gx = 0.5 * (s.clamped(ri, ci + 1) - s.clamped(ri, ci - 1));
                let gy = 0.5 * (s.clamped(ri + 1, ci) - s.clamped(ri - 1, ci));
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let b = (gy.atan2(gx) / (PI / 4.0)).rem_euclid(BINS as f64);
                let lo = b.floor();
                let frac = b - lo;
                let lo = lo as usize % BINS;
                let hi = (lo + 1) % BINS;
                planes[lo * w * h + r * w + c] += mag * (1.0 - frac);
                planes[hi * w * h + r * w + c] += mag * frac;
            }
        }
        let (iw, ih) = (w + 1, h + 1);
        let mut integral = vec![0.0; BINS * iw * ih];
        for o in 0..BINS {
            let plane = &planes[o * w * h..(o + 1) * w * h];
            let out = &mut integral[o * iw * ih..(o + 1) * iw * ih];
            for r in 0..h {
                let mut row_sum = 0.0;
                for c in 0..w {
                    row_sum += plane[r * w + c];
                    out[(r + 1) * iw + c + 1] = out[r * iw + c + 1] + row_sum;
                }
            }
        }
        Self {
            width: w,
            height: h,
            integral,
        }
    }

    /// Sum of bin `o` over rows `[r0, r1)` and cols `[c0, c1)`, clipped to the image.
    fn box_sum(&self, o: usize, r0: i64, r1: i64, c0: i64, c1: i64) -> f64 {
        let r0 = r0.clamp(0, self.height as i64) as usize;
        let r1 = r1.clamp(0, self.height as i64) as usize;
        let c0 = c0.clamp(0, self.width as i64) as usize;
        let c1 = c1.clamp(0, self.width as i64) as usize;
        if r0 >= r1 || c0 >= c1 {
            return 0.0;
        }
        let iw = self.width + 1;
        let p = &self.integral[o * iw * (self.height + 1)..];
        p[r1 * iw + c1] - p[r0 * iw + c1] - p[r1 * iw + c0] + p[r0 * iw + c0]
    }
}

pub fn extract_fixed(image: &GrayImage, grid: SampleGrid) -> Result<DescriptorField> {
    if image.width < PATCH || image.height < PATCH {
        return Err(Error::ImageTooSmall {
            width: image.width,
            height: image.height,
            patch: PATCH,
        });
    }
    let binned = BinnedGradients::new(image);
    let half = (PATCH / 2) as i64;
    let cell = (PATCH / CELLS) as i64;
    let mut values = vec![0.0; grid.len() * HOG_DIM];
    for (n, q) in grid.positions().enumerate() {
        let v = &mut values[n * HOG_DIM..(n + 1) * HOG_DIM];
        for a in 0..CELLS {
            let r0 = q[0] - half + cell * a as i64;
            for b in 0..CELLS {
                let c0 = q[1] - half + cell * b as i64;
                for o in 0..BINS {
                    let s = binned.box_sum(o, r0, r0 + cell, c0, c0 + cell);
                    v[(a * CELLS + b) * BINS + o] = s.max(0.0).sqrt();
                }
            }
        }
        l2_normalize(v);
    }
    DescriptorField::new(grid, HOG_DIM, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let pixels = (0..w * h)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        GrayImage::new(w, h, pixels).unwrap()
    }

    #[test]
    fn constant_image_gives_zero_descriptors() {
        let img = GrayImage::new(20, 20, vec![0.5; 400]).unwrap();
        let grid = SampleGrid::covering(20, 20, 4, 2).unwrap();
        let f = extract_fixed(&img, grid).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_normalized() {
        let img = noise_image(24, 20, 3);
        let grid = SampleGrid::covering(24, 20, 1, 0).unwrap();
        let a = extract_fixed(&img, grid).unwrap();
        let b = extract_fixed(&img.clone(), grid).unwrap();
        assert_eq!(a, b);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let n: f64 = a.get([r, c]).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6 || n == 0.0);
            }
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = GrayImage::new(15, 30, vec![0.0; 450]).unwrap();
        let grid = SampleGrid::covering(15, 30, 1, 0).unwrap();
        assert!(matches!(
            extract_fixed(&img, grid),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn rotating_an_edge_moves_mass_two_bins() {
        // Step edge at 30 degrees; rotation by 90 degrees maps
        // (gx, gy) -> (gy, -gx), i.e. the orientation drops by two bins.
        let n = PATCH;
        let (s, c) = (30f64.to_radians().sin(), 30f64.to_radians().cos());
        let pixels: Vec<f64> = (0..n * n)
            .map(|p| {
                let (r, col) = ((p / n) as f64 - 7.5, (p % n) as f64 - 7.5);
                if col * c + r * s > 0.0 {
                    0.8
                } else {
                    0.2
                }
            })
            .collect();
        let img = GrayImage::new(n, n, pixels.clone()).unwrap();
        let rotated: Vec<f64> = (0..n * n)
            .map(|p| {
                let (r, col) = (p / n, p % n);
                pixels[col * n + (n - 1 - r)]
            })
            .collect();
        let rot = GrayImage::new(n, n, rotated).unwrap();

        let totals = |img: &GrayImage| {
            let g = BinnedGradients::new(img);
            (0..BINS)
                .map(|o| g.box_sum(o, 0, n as i64, 0, n as i64))
                .collect::<Vec<_>>()
        };
        let a = totals(&img);
        let b = totals(&rot);
        let mass: f64 = a.iter().sum();
        assert!(mass > 1.0);
        for o in 0..BINS {
            assert!(
                (b[o] - a[(o + 2) % BINS]).abs() < 1e-9 * mass,
                "bin {o}: {} vs {}",
                b[o],
                a[(o + 2) % BINS]
            );
        }
        // The histogram is not rotation invariant on its own.
        assert!((0..BINS).any(|o| (a[o] - b[o]).abs() > 1e-3 * mass));
    }
}
