//! Fine-to-coarse stage: correlation, max pooling with switches, and corner
//! aggregation followed by the per-level power.

use std::hash::Hasher;

use crate::descriptors::DescriptorField;
use crate::error::{Error, Result};
use crate::geometry::{GeometryConfig, LevelGeometry};
use crate::par::for_each_chunk;
use crate::score::{is_sentinel, ScoreMap, Stage, SENTINEL};

/// Marks a pooled cell whose whole window was SENTINEL or padding.
pub const NO_SWITCH: u32 = u32::MAX;

/// Argmax locations of one max-pooling step: for every reference cell and
/// pooled displacement, the flat index of the winning input displacement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSwitches {
    rows: usize,
    cols: usize,
    in_span: usize,
    out_span: usize,
    switches: Vec<u32>,
}

impl PoolSwitches {
    pub fn in_span(&self) -> usize {
        self.in_span
    }

    pub fn out_span(&self) -> usize {
        self.out_span
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Winning input displacement for pooled displacement `k` of cell `i`.
    pub fn get(&self, i: [usize; 2], k: [usize; 2]) -> Option<[usize; 2]> {
        let n = self.out_span * self.out_span;
        let s = self.switches[(i[0] * self.cols + i[1]) * n + k[0] * self.out_span + k[1]];
        (s != NO_SWITCH).then(|| [s as usize / self.in_span, s as usize % self.in_span])
    }

    /// Flat switches of one reference cell.
    pub fn cell(&self, cell: usize) -> &[u32] {
        let n = self.out_span * self.out_span;
        &self.switches[cell * n..(cell + 1) * n]
    }
}

/// `S_0(k | i) = max(0, <phi(p), phi(q)>)`, SENTINEL where `q` leaves the target grid.
pub fn correlate(
    reference: &DescriptorField,
    target: &DescriptorField,
    geom: &LevelGeometry,
) -> Result<ScoreMap> {
    if reference.dim != target.dim {
        return Err(Error::shape(format!(
            "descriptor dimensions differ: {} vs {}",
            reference.dim, target.dim
        )));
    }
    let b = &geom.base;
    if reference.grid.stride != b.alpha0 || reference.grid.offset != b.beta0 {
        return Err(Error::shape(format!(
            "reference grid (stride {}, offset {}) does not match alpha0={} beta0={}",
            reference.grid.stride, reference.grid.offset, b.alpha0, b.beta0
        )));
    }
    if target.grid.stride != b.gamma0 {
        return Err(Error::shape(format!(
            "target grid stride {} does not match gamma0={}",
            target.grid.stride, b.gamma0
        )));
    }
    if reference.rows() != geom.rows || reference.cols() != geom.cols || geom.level != 0 {
        return Err(Error::shape("reference grid extent differs from level-0 geometry"));
    }
    let mut map = ScoreMap::filled(geom.rows, geom.cols, geom.range, Stage::Full(0), SENTINEL);
    let span = geom.span();
    let cols = geom.cols;
    for_each_chunk(map.data_mut(), span * span, |cell, slice| {
        let i = [cell / cols, cell % cols];
        let p = geom.ref_coord_unchecked(i);
        let phi_p = reference.get(i);
        for k0 in 0..span {
            for k1 in 0..span {
                let q = geom
                    .target_coord([k0, k1], p)
                    .expect("k within span");
                if let Some(t) = target.cell_at(q) {
                    let dot: f64 = phi_p.iter().zip(target.get(t)).map(|(a, b)| a * b).sum();
                    slice[k0 * span + k1] = dot.max(0.0);
                }
            }
        }
    });
    Ok(map)
}

/// Windowed max over displacements with stride 2 and SENTINEL padding.
/// Ties go to the first input in raster order.
pub fn max_pool(scores: &ScoreMap, geom: &LevelGeometry) -> Result<(ScoreMap, PoolSwitches)> {
    if scores.range() != geom.range || scores.rows() != geom.rows || scores.cols() != geom.cols {
        return Err(Error::shape("score map does not match pooling geometry"));
    }
    let pp = geom.pool_params()?;
    let in_span = geom.span();
    let out_span = pp.output_extent(in_span);
    let out_range = (out_span - 1) / 2;
    let mut pooled = ScoreMap::filled(
        geom.rows,
        geom.cols,
        out_range,
        Stage::Pooled(geom.level),
        SENTINEL,
    );
    let n_out = out_span * out_span;
    let mut switches = vec![NO_SWITCH; geom.rows * geom.cols * n_out];
    let window = |a: usize| {
        let start = (pp.stride * a) as i64 - pp.pad_before as i64;
        let lo = start.max(0) as usize;
        let hi = (start + pp.window as i64).min(in_span as i64).max(0) as usize;
        lo..hi
    };
    for cell in 0..geom.rows * geom.cols {
        let src = &scores.data()[cell * in_span * in_span..(cell + 1) * in_span * in_span];
        let dst = &mut pooled.data_mut()[cell * n_out..(cell + 1) * n_out];
        let sw = &mut switches[cell * n_out..(cell + 1) * n_out];
        for a in 0..out_span {
            for b in 0..out_span {
                let mut best = SENTINEL;
                let mut arg = NO_SWITCH;
                for r in window(a) {
                    for c in window(b) {
                        let v = src[r * in_span + c];
                        if v > best {
                            best = v;
                            arg = (r * in_span + c) as u32;
                        }
                    }
                }
                dst[a * out_span + b] = best;
                sw[a * out_span + b] = arg;
            }
        }
    }
    Ok((
        pooled,
        PoolSwitches {
            rows: geom.rows,
            cols: geom.cols,
            in_span,
            out_span,
            switches,
        },
    ))
}

/// Averages the four corner slices of the pooled map of level `geom.level`
/// (SENTINEL and out-of-grid children count as 0, the divisor stays 4) and
/// raises the result to `exponent`. Returns `(S_{l+1}, pre-power map)`.
pub fn aggregate(
    pooled: &ScoreMap,
    geom: &LevelGeometry,
    exponent: f64,
) -> Result<(ScoreMap, ScoreMap)> {
    if !(exponent > 0.0) || !exponent.is_finite() {
        return Err(Error::config(format!(
            "aggregation exponent must be positive and finite, got {exponent}"
        )));
    }
    if pooled.rows() != geom.rows || pooled.cols() != geom.cols {
        return Err(Error::shape("pooled map does not match aggregation geometry"));
    }
    let shifts = geom.aggregation_shifts();
    let n = pooled.slice_len();
    let (rows, cols) = (geom.rows, geom.cols);
    let stage = Stage::Full(geom.level + 1);
    let mut pre = ScoreMap::filled(rows, cols, pooled.range(), stage, 0.0);
    for_each_chunk(pre.data_mut(), n, |cell, acc| {
        let i = [(cell / cols) as i64, (cell % cols) as i64];
        for s in &shifts {
            let child = [i[0] + s[0], i[1] + s[1]];
            if !pooled.contains_cell(child) {
                continue;
            }
            let src = pooled.slice([child[0] as usize, child[1] as usize]);
            for (a, v) in acc.iter_mut().zip(src) {
                if !is_sentinel(*v) {
                    *a += *v;
                }
            }
        }
        acc.iter_mut().for_each(|a| *a *= 0.25);
    });
    let mut out = pre.clone();
    out.data_mut().iter_mut().for_each(|v| *v = power(*v, exponent));
    Ok((out, pre))
}

#[inline]
pub(crate) fn power(x: f64, exponent: f64) -> f64 {
    if x > 0.0 {
        x.powf(exponent)
    } else {
        0.0
    }
}

/// All forward maps and caches of the fine-to-coarse stage.
#[derive(Clone, Debug)]
pub struct PyramidState {
    pub config: GeometryConfig,
    pub rows: usize,
    pub cols: usize,
    /// `S_0 ... S_L`.
    pub scores: Vec<ScoreMap>,
    /// `S_{1/2} ... S_{L-1/2}`.
    pub pooled: Vec<ScoreMap>,
    /// Switches of the pooling from `S_l`, for `l = 0..L`.
    pub switches: Vec<PoolSwitches>,
    /// Aggregation output before the power, producing `S_1 ... S_L`.
    pub prepower: Vec<ScoreMap>,
    /// `nu_1 ... nu_L`.
    pub exponents: Vec<f64>,
}

impl PyramidState {
    pub fn levels(&self) -> usize {
        self.scores.len() - 1
    }

    pub fn level_geometry(&self, level: usize) -> LevelGeometry {
        self.config.level(level, self.rows, self.cols)
    }

    /// Feeds every pooling switch into `h`.
    pub fn hash_decisions<H: Hasher>(&self, h: &mut H) {
        for s in &self.switches {
            for v in &s.switches {
                h.write_u32(*v);
            }
        }
    }

    /// Smallest positive gap between a pooling winner and another in-window
    /// candidate, ignoring windows whose winner is 0.
    pub fn min_pool_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for l in 0..self.levels() {
            let geom = self.level_geometry(l);
            let pp = geom.pool_params().expect("validated geometry");
            let src = &self.scores[l];
            let sw = &self.switches[l];
            let in_span = sw.in_span;
            for cell in 0..self.rows * self.cols {
                let slice = &src.data()[cell * in_span * in_span..(cell + 1) * in_span * in_span];
                for (o, s) in sw.cell(cell).iter().enumerate() {
                    if *s == NO_SWITCH {
                        continue;
                    }
                    let win = slice[*s as usize];
                    if win <= 0.0 {
                        continue;
                    }
                    let (a, b) = (o / sw.out_span, o % sw.out_span);
                    let r0 = (2 * a) as i64 - pp.pad_before as i64;
                    let c0 = (2 * b) as i64 - pp.pad_before as i64;
                    for r in r0.max(0)..(r0 + pp.window as i64).min(in_span as i64) {
                        for c in c0.max(0)..(c0 + pp.window as i64).min(in_span as i64) {
                            let idx = r as usize * in_span + c as usize;
                            // Exact duplicates come from overlapping windows upstream and
                            // tie for every parameter value; flips are left to the fingerprint.
                            let g = win - slice[idx];
                            if idx != *s as usize && !is_sentinel(slice[idx]) && g > 0.0 {
                                gap = gap.min(g);
                            }
                        }
                    }
                }
            }
        }
        gap
    }
}

fn check_exponents(config: &GeometryConfig, exponents: &[f64]) -> Result<()> {
    config.validate()?;
    if exponents.len() != config.levels {
        return Err(Error::config(format!(
            "expected {} exponents, got {}",
            config.levels,
            exponents.len()
        )));
    }
    Ok(())
}

/// Runs the fine-to-coarse stage on an existing `S_0`.
pub fn build_from_scores(
    s0: ScoreMap,
    config: &GeometryConfig,
    exponents: &[f64],
) -> Result<PyramidState> {
    check_exponents(config, exponents)?;
    if s0.range() != config.range0 {
        return Err(Error::shape(format!(
            "S_0 range {} differs from range0 {}",
            s0.range(),
            config.range0
        )));
    }
    let (rows, cols) = (s0.rows(), s0.cols());
    let mut state = PyramidState {
        config: *config,
        rows,
        cols,
        scores: vec![s0],
        pooled: Vec::with_capacity(config.levels),
        switches: Vec::with_capacity(config.levels),
        prepower: Vec::with_capacity(config.levels),
        exponents: exponents.to_vec(),
    };
    for (l, &nu) in exponents.iter().enumerate() {
        let geom = config.level(l, rows, cols);
        let (pooled, switches) = max_pool(&state.scores[l], &geom)?;
        let (next, pre) = aggregate(&pooled, &geom, nu)?;
        state.pooled.push(pooled);
        state.switches.push(switches);
        state.prepower.push(pre);
        state.scores.push(next);
    }
    Ok(state)
}

pub fn build_pyramid(
    reference: &DescriptorField,
    target: &DescriptorField,
    config: &GeometryConfig,
    exponents: &[f64],
) -> Result<PyramidState> {
    check_exponents(config, exponents)?;
    let geom = config.level(0, reference.rows(), reference.cols());
    let s0 = correlate(reference, target, &geom)?;
    build_from_scores(s0, config, exponents)
}
