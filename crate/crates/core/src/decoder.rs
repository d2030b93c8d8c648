//! Coarse-to-fine stage: disaggregation and unpooling with summation,
//! plus the exhaustive path-max oracle it must agree with.

use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::geometry::LevelGeometry;
use crate::par::{for_each_chunk, for_each_chunk2};
use crate::pyramid::{PoolSwitches, PyramidState, NO_SWITCH};
use crate::score::{is_sentinel, ScoreMap, Stage, SENTINEL};

/// Marks a disaggregated cell with no in-grid source.
pub const NO_CORNER: u8 = u8::MAX;
/// Marks an unpooled cell that no pooled displacement routes to.
pub const NO_ROUTE: u32 = u32::MAX;

/// Refuse oracle instances with more paths than this.
pub const ORACLE_PATH_LIMIT: u128 = 1 << 28;

#[derive(Clone, Debug)]
pub struct DecodeState {
    /// `Q_0 ... Q_L`.
    pub maps: Vec<ScoreMap>,
    /// `Q_{1/2} ... Q_{L-1/2}`.
    pub half: Vec<ScoreMap>,
    /// Per cell of `Q_{l+1/2}`: index into [`crate::geometry::CORNERS`] of the winning source.
    pub corner_routes: Vec<Vec<u8>>,
    /// Per cell of `Q_l` (`l < L`): flat pooled displacement whose value was added.
    pub unpool_routes: Vec<Vec<u32>>,
}

impl DecodeState {
    pub fn levels(&self) -> usize {
        self.maps.len() - 1
    }

    pub fn q0(&self) -> &ScoreMap {
        &self.maps[0]
    }

    pub fn hash_decisions<H: Hasher>(&self, h: &mut H) {
        for r in &self.corner_routes {
            h.write(r);
        }
        for r in &self.unpool_routes {
            for v in r {
                h.write_u32(*v);
            }
        }
    }
}

/// `Q_{l+1/2}(k | i) = max_c Q_{l+1}(k | i - shift_c)` over in-grid parents;
/// ties go to the lowest corner index.
pub fn disaggregate(coarse: &ScoreMap, geom: &LevelGeometry) -> Result<(ScoreMap, Vec<u8>)> {
    if coarse.rows() != geom.rows || coarse.cols() != geom.cols {
        return Err(Error::shape("coarse map does not match disaggregation geometry"));
    }
    let shifts = geom.aggregation_shifts();
    let (rows, cols) = (geom.rows, geom.cols);
    let n = coarse.slice_len();
    let mut out = ScoreMap::filled(rows, cols, coarse.range(), Stage::Pooled(geom.level), SENTINEL);
    let mut routes = vec![NO_CORNER; rows * cols * n];
    for_each_chunk2(out.data_mut(), n, &mut routes, n, |cell, dst, route| {
        let i = [(cell / cols) as i64, (cell % cols) as i64];
        for (c, s) in shifts.iter().enumerate() {
            let parent = [i[0] - s[0], i[1] - s[1]];
            if !coarse.contains_cell(parent) {
                continue;
            }
            let src = coarse.slice([parent[0] as usize, parent[1] as usize]);
            for ((d, r), v) in dst.iter_mut().zip(route.iter_mut()).zip(src) {
                if *v > *d {
                    *d = *v;
                    *r = c as u8;
                }
            }
        }
    });
    Ok((out, routes))
}

/// `Q_l(k | i) = S_l(k | i) + max{Q_{l+1/2}(k' | i) : m_l(k' | i) = k}`,
/// SENTINEL where nothing routes to `k`; ties go to the first `k'`.
pub fn unpool(
    half: &ScoreMap,
    switches: &PoolSwitches,
    scores: &ScoreMap,
) -> Result<(ScoreMap, Vec<u32>)> {
    if half.rows() != switches.rows()
        || half.cols() != switches.cols()
        || half.span() != switches.out_span()
        || !(scores.rows() == half.rows() && scores.cols() == half.cols())
        || scores.span() != switches.in_span()
    {
        return Err(Error::shape("unpool inputs disagree with the pooling switches"));
    }
    let n_in = scores.slice_len();
    let mut out = ScoreMap::filled(
        scores.rows(),
        scores.cols(),
        scores.range(),
        scores.stage(),
        SENTINEL,
    );
    let mut routes = vec![NO_ROUTE; scores.rows() * scores.cols() * n_in];
    let cols = scores.cols();
    for_each_chunk2(out.data_mut(), n_in, &mut routes, n_in, |cell, dst, route| {
        let i = [cell / cols, cell % cols];
        let src = half.slice(i);
        for (kp, (&s, &v)) in switches.cell(cell).iter().zip(src).enumerate() {
            if s != NO_SWITCH && v > dst[s as usize] {
                dst[s as usize] = v;
                route[s as usize] = kp as u32;
            }
        }
        for (d, s) in dst.iter_mut().zip(scores.slice(i)) {
            if !is_sentinel(*d) {
                *d += *s;
            }
        }
    });
    Ok((out, routes))
}

pub fn decode(pyr: &PyramidState) -> Result<DecodeState> {
    let levels = pyr.levels();
    let mut maps: Vec<Option<ScoreMap>> = vec![None; levels + 1];
    let mut half = vec![None; levels];
    let mut corner_routes = vec![Vec::new(); levels];
    let mut unpool_routes = vec![Vec::new(); levels];
    maps[levels] = Some(pyr.scores[levels].clone());
    for l in (0..levels).rev() {
        let geom = pyr.level_geometry(l);
        let (h, cr) = disaggregate(maps[l + 1].as_ref().expect("decoded above"), &geom)?;
        let (q, ur) = unpool(&h, &pyr.switches[l], &pyr.scores[l])?;
        maps[l] = Some(q);
        half[l] = Some(h);
        corner_routes[l] = cr;
        unpool_routes[l] = ur;
    }
    Ok(DecodeState {
        maps: maps.into_iter().map(|m| m.expect("every level decoded")).collect(),
        half: half.into_iter().map(|m| m.expect("every level decoded")).collect(),
        corner_routes,
        unpool_routes,
    })
}

/// Number of paths [`decode_oracle`] would enumerate.
pub fn oracle_path_count(pyr: &PyramidState) -> u128 {
    let top = &pyr.scores[pyr.levels()];
    (top.rows() * top.cols() * top.slice_len()) as u128 * 4u128.pow(pyr.levels() as u32)
}

/// `Q_0(k | i)` as the maximum over all coarse-to-fine paths ending at
/// `(i, k)` of `S_L + ... + S_0`, accumulated from level `L` down.
pub fn decode_oracle(pyr: &PyramidState) -> Result<ScoreMap> {
    let paths = oracle_path_count(pyr);
    if paths > ORACLE_PATH_LIMIT {
        return Err(Error::TooLarge {
            paths,
            limit: ORACLE_PATH_LIMIT,
        });
    }
    let levels = pyr.levels();
    let s0 = &pyr.scores[0];
    let mut out = ScoreMap::filled(s0.rows(), s0.cols(), s0.range(), Stage::Full(0), SENTINEL);
    let shifts: Vec<_> = (0..levels)
        .map(|l| pyr.level_geometry(l).aggregation_shifts())
        .collect();
    let top = &pyr.scores[levels];
    for i in top.cells().collect::<Vec<_>>() {
        for k in 0..top.slice_len() {
            let acc = top.slice(i)[k];
            descend(pyr, &shifts, levels, [i[0] as i64, i[1] as i64], k, acc, &mut out);
        }
    }
    Ok(out)
}

fn descend(
    pyr: &PyramidState,
    shifts: &[[[i64; 2]; 4]],
    level: usize,
    i: [i64; 2],
    k: usize,
    acc: f64,
    out: &mut ScoreMap,
) {
    if level == 0 {
        let slot = &mut out.slice_mut([i[0] as usize, i[1] as usize])[k];
        if acc > *slot {
            *slot = acc;
        }
        return;
    }
    let l = level - 1;
    let fine = &pyr.scores[l];
    for s in &shifts[l] {
        let child = [i[0] + s[0], i[1] + s[1]];
        if !fine.contains_cell(child) {
            continue;
        }
        let cu = [child[0] as usize, child[1] as usize];
        let switch = pyr.switches[l].cell(fine.cell_index(cu))[k];
        if switch == NO_SWITCH {
            continue;
        }
        let kl = switch as usize;
        descend(pyr, shifts, l, child, kl, fine.slice(cu)[kl] + acc, out);
    }
}

/// Smallest positive gap between a max winner and a competing candidate in
/// the decoder (exact ties are left to the decision fingerprint).
pub fn min_decode_gap(pyr: &PyramidState, dec: &DecodeState) -> f64 {
    let mut gap = f64::INFINITY;
    let mut consider = |win: f64, other: f64| {
        if !is_sentinel(win) && !is_sentinel(other) {
            let g = win - other;
            if g > 0.0 {
                gap = gap.min(g);
            }
        }
    };
    for l in 0..dec.levels() {
        let geom = pyr.level_geometry(l);
        let shifts = geom.aggregation_shifts();
        let coarse = &dec.maps[l + 1];
        let half = &dec.half[l];
        for i in half.cells().collect::<Vec<_>>() {
            for k in 0..half.slice_len() {
                let win = half.slice(i)[k];
                for s in &shifts {
                    let parent = [i[0] as i64 - s[0], i[1] as i64 - s[1]];
                    if coarse.contains_cell(parent) {
                        consider(win, coarse.slice([parent[0] as usize, parent[1] as usize])[k]);
                    }
                }
            }
        }
        let sw = &pyr.switches[l];
        for cell in 0..half.rows() * half.cols() {
            let i = [cell / half.cols(), cell % half.cols()];
            let n = pyr.scores[l].slice_len();
            let mut best = vec![Vec::new(); n];
            for (kp, &s) in sw.cell(cell).iter().enumerate() {
                if s != NO_SWITCH {
                    best[s as usize].push(half.slice(i)[kp]);
                }
            }
            for group in best {
                let win = group.iter().copied().fold(SENTINEL, f64::max);
                group.iter().for_each(|v| consider(win, *v));
            }
        }
    }
    gap
}

pub(crate) fn check_same_shape(a: &ScoreMap, b: &ScoreMap, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!("{what}: score map shapes differ")));
    }
    Ok(())
}

/// Sanity helper for tests and the self-test: cells where two maps differ.
pub fn mismatched_cells(a: &ScoreMap, b: &ScoreMap) -> Result<usize> {
    check_same_shape(a, b, "mismatch count")?;
    let mut count = vec![0usize; a.rows() * a.cols()];
    let n = a.slice_len();
    for_each_chunk(&mut count, 1, |cell, c| {
        let x = &a.data()[cell * n..(cell + 1) * n];
        let y = &b.data()[cell * n..(cell + 1) * n];
        c[0] = x.iter().zip(y).filter(|(u, v)| u.to_bits() != v.to_bits()).count();
    });
    Ok(count.iter().sum())
}
