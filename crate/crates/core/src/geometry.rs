//! Discretization of the reference grid `p` and the relative target grid `q`.
//!
//! All indices here are zero-based. A reference cell `i` at level `l` sits at
//! pixel `p = alpha0 * (i + tau_l) + beta0`, and displacement index `k` at
//! level `l` addresses `q = 2^l * gamma0 * (k - R_l) + p`, so `k = R_l` is the
//! identity match. Pairs are `[row, col]`.

use crate::error::{Error, Result};

/// Corner signs of the aggregation square, in summation order.
pub const CORNERS: [[i64; 2]; 4] = [[-1, -1], [-1, 1], [1, 1], [1, -1]];

/// Base parameters shared by every level of the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeometryConfig {
    /// Number of aggregation levels `L`.
    pub levels: usize,
    /// Displacement range `R_0` in level-0 samples.
    pub range0: usize,
    /// Reference grid stride in pixels.
    pub alpha0: i64,
    /// Reference grid offset in pixels.
    pub beta0: i64,
    /// Target sampling stride in pixels at level 0.
    pub gamma0: i64,
    /// Aggregation square side at level 0 in pixels.
    pub delta0: i64,
    /// Pooling half-window at level 0 in pixels.
    pub eta0: i64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            levels: 6,
            range0: 80,
            alpha0: 8,
            beta0: 4,
            gamma0: 1,
            delta0: 8,
            eta0: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolParams {
    pub window: usize,
    pub stride: usize,
    pub pad_before: usize,
    pub pad_after: usize,
}

impl PoolParams {
    pub fn output_extent(&self, input_extent: usize) -> usize {
        (input_extent + self.pad_before + self.pad_after - self.window) / self.stride + 1
    }
}

pub fn next_range(range: usize) -> usize {
    range.div_ceil(2)
}

fn ceil_div(a: i64, b: i64) -> i64 {
    (a + b - 1).div_euclid(b)
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha0", self.alpha0),
            ("gamma0", self.gamma0),
            ("delta0", self.delta0),
            ("eta0", self.eta0),
        ];
        for (name, v) in positive {
            if v <= 0 {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta0 < 0 {
            return Err(Error::config(format!(
                "beta0 must be non-negative, got {}",
                self.beta0
            )));
        }
        if self.range0 == 0 {
            return Err(Error::config("range0 must be at least 1"));
        }
        if self.eta0 % self.gamma0 != 0 {
            return Err(Error::config(format!(
                "gamma0 must divide eta0 (gamma0={}, eta0={})",
                self.gamma0, self.eta0
            )));
        }
        if self.delta0 % self.alpha0 != 0 {
            return Err(Error::config(format!(
                "alpha0 must divide delta0 (alpha0={}, delta0={})",
                self.alpha0, self.delta0
            )));
        }
        if self.alpha0 % self.gamma0 != 0 {
            return Err(Error::config(format!(
                "gamma0 must divide alpha0 (gamma0={}, alpha0={})",
                self.gamma0, self.alpha0
            )));
        }
        if self.delta0 % 2 != 0 {
            return Err(Error::config(format!(
                "delta0 must be even so coarse reference cells land on pixels (delta0={})",
                self.delta0
            )));
        }
        if self.levels > 24 {
            return Err(Error::config(format!("too many levels: {}", self.levels)));
        }
        Ok(())
    }

    /// `R_0, R_1, ..., R_L`.
    pub fn ranges(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.levels + 1);
        let mut r = self.range0;
        out.push(r);
        for _ in 0..self.levels {
            r = next_range(r);
            out.push(r);
        }
        out
    }

    pub fn range(&self, level: usize) -> usize {
        let mut r = self.range0;
        for _ in 0..level {
            r = next_range(r);
        }
        r
    }

    /// Number of reference cells along an axis of `extent` pixels.
    pub fn grid_extent(&self, extent: usize) -> usize {
        let extent = extent as i64;
        if extent <= self.beta0 {
            0
        } else {
            ((extent - self.beta0 - 1) / self.alpha0 + 1) as usize
        }
    }

    pub fn level(&self, level: usize, rows: usize, cols: usize) -> LevelGeometry {
        LevelGeometry {
            level,
            range: self.range(level),
            rows,
            cols,
            base: *self,
        }
    }

    /// `alpha0 * tau_l`, an integer pixel offset under the validated invariants.
    pub fn tau_pixels(&self, level: usize) -> i64 {
        if level == 0 {
            0
        } else {
            self.delta0 / 2 - self.alpha0 * ceil_div(self.delta0, 2 * self.alpha0)
        }
    }

    /// `tau_l` as a fraction of the reference stride.
    pub fn tau(&self, level: usize) -> f64 {
        if level == 0 {
            0.0
        } else {
            let ratio = self.delta0 as f64 / (2.0 * self.alpha0 as f64);
            ratio - ratio.ceil()
        }
    }

    /// Reference-index offsets from a coarse cell `i_{l+1}` to its four
    /// children `i_l` when aggregating from level `l` to `l + 1`.
    pub fn aggregation_shifts(&self, level: usize) -> [[i64; 2]; 4] {
        let ratio = self.delta0 / self.alpha0;
        let mut out = [[0i64; 2]; 4];
        for (slot, eps) in out.iter_mut().zip(CORNERS.iter()) {
            for d in 0..2 {
                slot[d] = if level == 0 {
                    ratio * (eps[d] + 1) / 2 - ceil_div(self.delta0, 2 * self.alpha0)
                } else {
                    (1i64 << (level - 1)) * ratio * eps[d]
                };
            }
        }
        out
    }

    pub fn pool_params(&self, level: usize) -> Result<PoolParams> {
        let half = (self.eta0 / self.gamma0) as i64;
        let r = self.range(level) as i64;
        let r_next = next_range(r as usize) as i64;
        let pad = half + 2 * r_next - r;
        if pad < 0 {
            return Err(Error::config(format!(
                "negative pooling padding {pad} at level {level}"
            )));
        }
        Ok(PoolParams {
            window: (1 + 2 * half) as usize,
            stride: 2,
            pad_before: pad as usize,
            pad_after: pad as usize,
        })
    }
}

/// Geometry of one level of the pyramid over a fixed reference grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGeometry {
    pub level: usize,
    pub range: usize,
    pub rows: usize,
    pub cols: usize,
    pub base: GeometryConfig,
}

impl LevelGeometry {
    /// Side of the displacement index square, `2R + 1`.
    pub fn span(&self) -> usize {
        2 * self.range + 1
    }

    /// Pixel distance between adjacent displacement samples.
    pub fn displacement_stride(&self) -> i64 {
        (1i64 << self.level) * self.base.gamma0
    }

    pub fn target_coord(&self, k: [usize; 2], p: [i64; 2]) -> Result<[i64; 2]> {
        let span = self.span();
        if k[0] >= span || k[1] >= span {
            return Err(Error::Index {
                index: [k[0] as i64, k[1] as i64],
                extent: [span as i64, span as i64],
            });
        }
        let s = self.displacement_stride();
        let r = self.range as i64;
        Ok([
            s * (k[0] as i64 - r) + p[0],
            s * (k[1] as i64 - r) + p[1],
        ])
    }

    pub fn ref_coord(&self, i: [usize; 2]) -> Result<[i64; 2]> {
        if i[0] >= self.rows || i[1] >= self.cols {
            return Err(Error::Index {
                index: [i[0] as i64, i[1] as i64],
                extent: [self.rows as i64, self.cols as i64],
            });
        }
        Ok(self.ref_coord_unchecked(i))
    }

    pub(crate) fn ref_coord_unchecked(&self, i: [usize; 2]) -> [i64; 2] {
        let b = &self.base;
        let off = b.tau_pixels(self.level) + b.beta0;
        [
            b.alpha0 * i[0] as i64 + off,
            b.alpha0 * i[1] as i64 + off,
        ]
    }

    /// Displacement index of the sample nearest to pixel displacement `d`,
    /// or `None` when it falls outside the range.
    pub fn snap_displacement(&self, d: [f64; 2]) -> Option<[usize; 2]> {
        let s = self.displacement_stride() as f64;
        let r = self.range as i64;
        let mut out = [0usize; 2];
        for a in 0..2 {
            if !d[a].is_finite() {
                return None;
            }
            let k = (d[a] / s).round() as i64 + r;
            if k < 0 || k > 2 * r {
                return None;
            }
            out[a] = k as usize;
        }
        Some(out)
    }

    pub fn pool_params(&self) -> Result<PoolParams> {
        self.base.pool_params(self.level)
    }

    pub fn aggregation_shifts(&self) -> [[i64; 2]; 4] {
        self.base.aggregation_shifts(self.level)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(levels: usize, range0: usize) -> GeometryConfig {
        GeometryConfig {
            levels,
            range0,
            ..GeometryConfig::default()
        }
    }

    #[test]
    fn target_coord_examples() {
        let c = cfg(6, 80);
        let g0 = c.level(0, 1, 1);
        assert_eq!(g0.target_coord([80, 80], [100, 60]).unwrap(), [100, 60]);
        assert_eq!(g0.target_coord([160, 80], [0, 0]).unwrap(), [80, 0]);
        let g2 = c.level(2, 1, 1);
        assert_eq!(g2.range, 20);
        assert_eq!(g2.target_coord([0, 0], [0, 0]).unwrap(), [-80, -80]);
        assert!(g0.target_coord([161, 0], [0, 0]).is_err());
    }

    #[test]
    fn ref_coord_examples() {
        let c = cfg(6, 80);
        let g0 = c.level(0, 16, 16);
        assert_eq!(g0.ref_coord([0, 0]).unwrap(), [4, 4]);
        assert_eq!(g0.ref_coord([1, 2]).unwrap(), [12, 20]);
        let g1 = c.level(1, 16, 16);
        assert_eq!(c.tau(1), -0.5);
        assert_eq!(g1.ref_coord([0, 0]).unwrap(), [0, 0]);
        assert!(g1.ref_coord([16, 0]).is_err());
    }

    #[test]
    fn range_sequence() {
        assert_eq!(cfg(6, 80).ranges(), vec![80, 40, 20, 10, 5, 3, 2]);
        assert_eq!(next_range(1), 1);
        assert_eq!(next_range(5), 3);
    }

    #[test]
    fn pool_params_examples() {
        let c = cfg(6, 80);
        let p = c.pool_params(0).unwrap();
        assert_eq!(p.window, 3);
        assert_eq!((p.pad_before, p.pad_after), (1, 1));
        assert_eq!(p.output_extent(161), 81);
        // R_l = 5 -> R_{l+1} = 3
        let p = c.pool_params(4).unwrap();
        assert_eq!(c.range(4), 5);
        assert_eq!((p.pad_before, p.pad_after), (2, 2));
        assert_eq!(p.output_extent(11), 7);
    }

    #[test]
    fn aggregation_shift_examples() {
        let c = cfg(6, 80);
        // Children straddle the coarse cell: level-1 cell i sits at 8i, its
        // level-0 children at 8i - 4 (cell i - 1) and 8i + 4 (cell i).
        assert_eq!(c.aggregation_shifts(0), [[-1, -1], [-1, 0], [0, 0], [0, -1]]);
        assert_eq!(c.aggregation_shifts(1), CORNERS);
        let s3 = c.aggregation_shifts(3);
        for (s, e) in s3.iter().zip(CORNERS.iter()) {
            assert_eq!(*s, [4 * e[0], 4 * e[1]]);
        }
    }

    #[test]
    fn aggregation_shifts_land_on_corner_pixels() {
        // Children of a coarse cell sit at p +- 2^l * delta0 / 2 in pixel space.
        for (alpha0, delta0) in [(8, 8), (4, 8), (2, 6), (4, 4)] {
            let c = GeometryConfig {
                alpha0,
                delta0,
                beta0: 2,
                ..cfg(4, 16)
            };
            c.validate().unwrap();
            for l in 0..4 {
                let coarse = c.level(l + 1, 64, 64);
                let fine = c.level(l, 64, 64);
                let i = [20usize, 20usize];
                let p = coarse.ref_coord(i).unwrap();
                for (s, e) in c.aggregation_shifts(l).iter().zip(CORNERS.iter()) {
                    let child = [(i[0] as i64 + s[0]) as usize, (i[1] as i64 + s[1]) as usize];
                    let pc = fine.ref_coord(child).unwrap();
                    let half = (1i64 << l) * delta0 / 2;
                    assert_eq!(pc, [p[0] + half * e[0], p[1] + half * e[1]]);
                }
            }
        }
    }

    #[test]
    fn validation_names_invariant() {
        let bad = GeometryConfig {
            alpha0: 6,
            delta0: 8,
            ..GeometryConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("alpha0 must divide delta0"), "{msg}");
        GeometryConfig::default().validate().unwrap();
    }

    #[test]
    fn grid_extent_counts_cells() {
        let c = GeometryConfig::default();
        assert_eq!(c.grid_extent(128), 16);
        assert_eq!(c.grid_extent(4), 0);
        assert_eq!(c.grid_extent(5), 1);
    }

    #[test]
    fn snap_displacement_rounds_and_bounds() {
        let g = cfg(2, 4).level(0, 1, 1);
        assert_eq!(g.snap_displacement([0.4, -1.6]), Some([4, 2]));
        assert_eq!(g.snap_displacement([4.4, 0.0]), Some([8, 4]));
        assert_eq!(g.snap_displacement([4.6, 0.0]), None);
        assert_eq!(g.snap_displacement([f64::NAN, 0.0]), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn padded_extent_identity(r in 1usize..400, half in 1i64..4) {
                let c = GeometryConfig { range0: r, levels: 1, eta0: half, ..GeometryConfig::default() };
                let p = c.pool_params(0).unwrap();
                let rn = next_range(r);
                prop_assert_eq!(2 * r + 1 + p.pad_before + p.pad_after, 2 * (2 * rn + 1) + p.window - 2);
                prop_assert_eq!(p.output_extent(2 * r + 1), 2 * rn + 1);
            }

            #[test]
            fn center_index_is_identity(l in 0usize..6, r0 in 1usize..100, p0 in -500i64..500, p1 in -500i64..500) {
                let c = GeometryConfig { range0: r0, levels: 6, ..GeometryConfig::default() };
                let g = c.level(l, 1, 1);
                prop_assert_eq!(g.target_coord([g.range, g.range], [p0, p1]).unwrap(), [p0, p1]);
            }

            #[test]
            fn shifts_are_exact(mult in 1i64..4, alpha in 1i64..6, l in 0usize..5) {
                let c = GeometryConfig { alpha0: 2 * alpha, delta0: 2 * alpha * mult, gamma0: 1, ..GeometryConfig::default() };
                c.validate().unwrap();
                // Integer result must equal the real-valued appendix expression.
                let s = c.aggregation_shifts(l);
                for (si, e) in s.iter().zip(CORNERS.iter()) {
                    for d in 0..2 {
                        let ratio = c.delta0 as f64 / (2.0 * c.alpha0 as f64);
                        let real = (1u64 << l) as f64 * ratio * e[d] as f64 + c.tau(l + 1) - c.tau(l);
                        prop_assert_eq!(si[d] as f64, real);
                    }
                }
            }
        }
    }
}
