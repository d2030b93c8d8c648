//! Deterministic synthetic image pairs with dense ground-truth flow.
//!
//! The target image is produced by inverse warping: `I1(y) = I0(y - w(y))`
//! with bilinear, clamp-to-edge sampling. Ground truth at reference pixel `p`
//! is the displacement `y - p` of the solution of `y - w(y) = p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageBuffer;
use crate::error::{Error, Result};
use crate::matching::FlowField;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    /// Multi-octave smooth value noise.
    SmoothNoise,
    /// Checkerboard overlaid with smooth noise, so it is not periodic.
    CheckerNoise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MotionKind {
    /// Integer translation by `dx` columns and `dy` rows.
    Translation { dx: i64, dy: i64 },
    /// Random affine map with displacements bounded by the magnitude.
    Affine,
    /// Random smooth low-frequency deformation bounded by the magnitude.
    SmoothWarp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub texture: TextureKind,
    pub motion: MotionKind,
    /// Displacement bound in pixels for the random motions.
    pub magnitude: f64,
    /// Largest displacement the matcher can score (`R_0 * gamma0`).
    pub max_displacement: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            texture: TextureKind::SmoothNoise,
            motion: MotionKind::Translation { dx: 0, dy: 0 },
            magnitude: 4.0,
            max_displacement: 80.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub image0: ImageBuffer,
    pub image1: ImageBuffer,
    pub flow: FlowField,
}

/// Smoothly interpolated random lattice with spacing `scale` pixels.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, scale: usize) -> Vec<f64> {
    let lw = w / scale + 2;
    let lh = h / scale + 2;
    let lattice: Vec<f64> = (0..lw * lh).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let fy = y as f64 / scale as f64;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / scale as f64;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |r: usize, c: usize| lattice[r * lw + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn texture(rng: &mut ChaCha8Rng, kind: TextureKind, w: usize, h: usize) -> Vec<u8> {
    let mut v = vec![0.0; w * h];
    for (scale, amp) in [(16, 1.0), (8, 0.6), (4, 0.4), (2, 0.25)] {
        let n = value_noise(rng, w, h, scale);
        v.iter_mut().zip(&n).for_each(|(a, b)| *a += amp * b);
    }
    if kind == TextureKind::CheckerNoise {
        let cell = rng.random_range(6..=12usize);
        for y in 0..h {
            for x in 0..w {
                let on = ((x / cell) + (y / cell)) % 2 == 0;
                v[y * w + x] = 0.5 * v[y * w + x] + if on { 1.6 } else { 0.0 };
            }
        }
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    v.iter()
        .map(|x| (16.0 + 223.0 * (x - lo) / span).round() as u8)
        .collect()
}

/// Bilinear sample at `(x, y)` with clamp-to-edge addressing.
fn bilinear(img: &[u8], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let at = |r: usize, c: usize| img[r * w + c] as f64;
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Backward displacement field `w(y)` in pixels, as `[dx, dy]`.
enum Warp {
    Translation([f64; 2]),
    Affine { center: [f64; 2], a: [[f64; 2]; 2], t: [f64; 2] },
    Smooth { waves: Vec<([f64; 2], f64, [f64; 2])> },
}

impl Warp {
    fn random(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Self {
        let m = spec.magnitude;
        match spec.motion {
            MotionKind::Translation { dx, dy } => Warp::Translation([dx as f64, dy as f64]),
            MotionKind::Affine => {
                let half = 0.5 * (spec.width.max(spec.height) as f64);
                // Linear part contributes at most m/2 at the image border.
                let g = 0.25 * m / half;
                let mut a = [[0.0; 2]; 2];
                for row in a.iter_mut() {
                    for v in row.iter_mut() {
                        *v = rng.random_range(-g..=g);
                    }
                }
                let t = [rng.random_range(-m / 2.0..=m / 2.0), rng.random_range(-m / 2.0..=m / 2.0)];
                let center = [spec.width as f64 / 2.0, spec.height as f64 / 2.0];
                Warp::Affine { center, a, t }
            }
            MotionKind::SmoothWarp => {
                let base = [rng.random_range(-m / 2.0..=m / 2.0), rng.random_range(-m / 2.0..=m / 2.0)];
                let mut waves = vec![([0.0, 0.0], 0.0, base)];
                let ext = spec.width.max(spec.height) as f64;
                for _ in 0..3 {
                    let freq = [
                        rng.random_range(-1.5..=1.5) * std::f64::consts::TAU / ext,
                        rng.random_range(-1.5..=1.5) * std::f64::consts::TAU / ext,
                    ];
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    let amp = [rng.random_range(-m / 6.0..=m / 6.0), rng.random_range(-m / 6.0..=m / 6.0)];
                    waves.push((freq, phase, amp));
                }
                Warp::Smooth { waves }
            }
        }
    }

    fn at(&self, y: [f64; 2]) -> [f64; 2] {
        match self {
            Warp::Translation(t) => *t,
            Warp::Affine { center, a, t } => {
                let d = [y[0] - center[0], y[1] - center[1]];
                [
                    a[0][0] * d[0] + a[0][1] * d[1] + t[0],
                    a[1][0] * d[0] + a[1][1] * d[1] + t[1],
                ]
            }
            Warp::Smooth { waves } => {
                let mut out = [0.0; 2];
                for (f, phase, amp) in waves {
                    let s = if f[0] == 0.0 && f[1] == 0.0 {
                        1.0
                    } else {
                        (f[0] * y[0] + f[1] * y[1] + phase).sin()
                    };
                    out[0] += amp[0] * s;
                    out[1] += amp[1] * s;
                }
                out
            }
        }
    }

    /// Solves `y - w(y) = p` by fixed-point iteration; `None` when the
    /// iteration does not converge (the warp is not a contraction there).
    fn forward(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        if let Warp::Translation(t) = self {
            return Some([p[0] + t[0], p[1] + t[1]]);
        }
        let mut y = p;
        for _ in 0..200 {
            let w = self.at(y);
            let next = [p[0] + w[0], p[1] + w[1]];
            let step = (next[0] - y[0]).abs().max((next[1] - y[1]).abs());
            y = next;
            if step < 1e-12 {
                return Some(y);
            }
        }
        None
    }
}

pub fn generate_pair(spec: &SyntheticSpec) -> Result<SyntheticPair> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(Error::config(format!("empty synthetic extent {w}x{h}")));
    }
    let bound = match spec.motion {
        MotionKind::Translation { dx, dy } => dx.abs().max(dy.abs()) as f64,
        _ => spec.magnitude,
    };
    if !(bound >= 0.0) || bound > spec.max_displacement {
        return Err(Error::config(format!(
            "motion magnitude {bound} exceeds the scoreable range {}",
            spec.max_displacement
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let image0 = texture(&mut rng, spec.texture, w, h);
    let warp = Warp::random(&mut rng, spec);
    let mut image1 = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let d = warp.at([x as f64, y as f64]);
            let v = bilinear(&image0, w, h, x as f64 - d[0], y as f64 - d[1]);
            image1[y * w + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut flow = FlowField::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let Some(q) = warp.forward([x as f64, y as f64]) else {
                continue;
            };
            let d = [q[0] - x as f64, q[1] - y as f64];
            let inside = q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= (w - 1) as f64 && q[1] <= (h - 1) as f64;
            if inside && d[0].abs().max(d[1].abs()) <= spec.max_displacement {
                flow.set(x, y, d);
            }
        }
    }
    Ok(SyntheticPair {
        image0: ImageBuffer::gray(w, h, image0)?,
        image1: ImageBuffer::gray(w, h, image1)?,
        flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(motion: MotionKind) -> SyntheticSpec {
        SyntheticSpec {
            width: 48,
            height: 40,
            motion,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn zero_translation_is_identity() {
        let p = generate_pair(&spec(MotionKind::Translation { dx: 0, dy: 0 })).unwrap();
        assert_eq!(p.image0, p.image1);
        assert_eq!(p.flow.valid_count(), 48 * 40);
        assert!((0..p.flow.len()).all(|i| p.flow.get_index(i) == Some([0.0, 0.0])));
    }

    #[test]
    fn integer_translation_shifts_exactly() {
        let p = generate_pair(&spec(MotionKind::Translation { dx: 5, dy: 0 })).unwrap();
        for y in 0..40 {
            for x in 0..43 {
                assert_eq!(p.image1.pixel(x + 5, y), p.image0.pixel(x, y));
                assert_eq!(p.flow.get(x, y), Some([5.0, 0.0]));
            }
            for x in 43..48 {
                assert_eq!(p.flow.get(x, y), None);
            }
        }
    }

    #[test]
    fn same_seed_same_pair() {
        for motion in [MotionKind::Affine, MotionKind::SmoothWarp] {
            for texture in [TextureKind::SmoothNoise, TextureKind::CheckerNoise] {
                let s = SyntheticSpec { texture, ..spec(motion) };
                assert_eq!(generate_pair(&s).unwrap(), generate_pair(&s).unwrap());
            }
        }
    }

    #[test]
    fn warped_flow_is_consistent_with_images() {
        for motion in [MotionKind::Affine, MotionKind::SmoothWarp] {
            let s = SyntheticSpec { magnitude: 6.0, ..spec(motion) };
            let p = generate_pair(&s).unwrap();
            assert!(p.flow.valid_count() > 48 * 40 / 2);
            let mut err = 0.0;
            let mut n = 0.0;
            for y in 0..40 {
                for x in 0..48 {
                    if let Some([u, v]) = p.flow.get(x, y) {
                        assert!(u.abs().max(v.abs()) <= 6.0 + 1e-9);
                        let img1: Vec<u8> = p.image1.data().to_vec();
                        let a = bilinear(&img1, 48, 40, x as f64 + u, y as f64 + v);
                        err += (a - p.image0.pixel(x, y)[0] as f64).abs();
                        n += 1.0;
                    }
                }
            }
            assert!(err / n < 4.0, "mean photometric error {}", err / n);
        }
    }

    #[test]
    fn magnitude_beyond_range_is_rejected() {
        let s = SyntheticSpec { max_displacement: 4.0, ..spec(MotionKind::Translation { dx: 5, dy: 0 }) };
        assert!(generate_pair(&s).is_err());
        let s = SyntheticSpec { magnitude: 9.0, max_displacement: 8.0, ..spec(MotionKind::Affine) };
        assert!(generate_pair(&s).is_err());
    }
}
