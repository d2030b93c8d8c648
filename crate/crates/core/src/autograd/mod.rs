//! Reverse-mode gradients through the whole U-shaped pipeline.
//!
//! Max operators route their gradient to the recorded winner (switches,
//! corner routes, unpool routes); the additions of the decoder fan the
//! gradient out to `S_l`; aggregation distributes a quarter to each in-grid
//! child; correlation applies the outer-product rule behind the rectifier.

mod gradcheck;

pub use gradcheck::{
    decision_fingerprint, gradcheck, find_tie_free_instance, GradEntry, GradcheckConfig,
    GradcheckInstance, GradcheckReport, ParamId,
};

use crate::decoder::{DecodeState, NO_CORNER, NO_ROUTE};
use crate::descriptors::{extract_backward, DescriptorField, ExtractorCache, ExtractorParams};
use crate::error::{Error, Result};
use crate::geometry::LevelGeometry;
use crate::par::for_each_chunk;
use crate::pyramid::{PoolSwitches, PyramidState, NO_SWITCH};
use crate::score::{is_sentinel, ScoreMap, Stage};

/// Which map of the pipeline the loss is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attachment {
    /// `S_l`.
    Score(usize),
    /// `Q_l`.
    Decoded(usize),
}

impl Attachment {
    pub fn level(&self) -> usize {
        match self {
            Attachment::Score(l) | Attachment::Decoded(l) => *l,
        }
    }

    pub fn needs_decoder(&self) -> bool {
        matches!(self, Attachment::Decoded(_))
    }
}

impl std::fmt::Display for Attachment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Attachment::Score(l) => write!(f, "S{l}"),
            Attachment::Decoded(l) => write!(f, "Q{l}"),
        }
    }
}

impl std::str::FromStr for Attachment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("attachment must be S<level> or Q<level>, got {s:?}"));
        let (kind, level) = s.split_at(s.len().min(1));
        let level: usize = level.parse().map_err(|_| bad())?;
        match kind {
            "S" | "s" => Ok(Attachment::Score(level)),
            "Q" | "q" => Ok(Attachment::Decoded(level)),
            _ => Err(bad()),
        }
    }
}

/// Forward record of one image pair, consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct GradTape {
    pub pyramid: PyramidState,
    pub decoded: Option<DecodeState>,
    pub reference: DescriptorField,
    pub target: DescriptorField,
    pub reference_cache: Option<ExtractorCache>,
    pub target_cache: Option<ExtractorCache>,
}

impl GradTape {
    pub fn attachment_map(&self, attachment: Attachment) -> Result<&ScoreMap> {
        let l = attachment.level();
        if l > self.pyramid.levels() {
            return Err(Error::config(format!(
                "attachment level {l} exceeds the {} pyramid levels",
                self.pyramid.levels()
            )));
        }
        match attachment {
            Attachment::Score(_) => Ok(&self.pyramid.scores[l]),
            Attachment::Decoded(_) => self
                .decoded
                .as_ref()
                .map(|d| &d.maps[l])
                .ok_or(Error::MissingCache("decoder state")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// `dL / d nu_l` for `l = 1..=L`.
    pub exponents: Vec<f64>,
    /// Total gradient w.r.t. each `S_l`.
    pub scores: Vec<ScoreMap>,
    /// Gradient w.r.t. the normalized reference descriptors.
    pub reference: Vec<f64>,
    /// Gradient w.r.t. the normalized target descriptors.
    pub target: Vec<f64>,
    /// Extractor weight gradient (trainable extractor only).
    pub extractor: Option<ExtractorParams>,
}

/// Routes `dQ_l` through `Q_l = S_l + unpool(Q_{l+1/2})`: returns `dQ_{l+1/2}`
/// and adds `dQ_l` to `dS_l` at every non-sentinel cell.
pub fn unpool_backward(
    d_q: &ScoreMap,
    q: &ScoreMap,
    routes: &[u32],
    half_shape: &ScoreMap,
    d_s: &mut ScoreMap,
) -> Result<ScoreMap> {
    if !d_q.same_shape(q) || !d_s.same_shape(q) || routes.len() != q.data().len() {
        return Err(Error::shape("unpool backward inputs disagree"));
    }
    let mut d_half = ScoreMap::filled(
        half_shape.rows(),
        half_shape.cols(),
        half_shape.range(),
        half_shape.stage(),
        0.0,
    );
    let n = q.slice_len();
    let nh = d_half.slice_len();
    // Each pooled k' is the route of at most one k, so writes never collide.
    crate::par::for_each_chunk2(d_half.data_mut(), nh, d_s.data_mut(), n, |cell, dh, ds| {
        let base = cell * n;
        for k in 0..n {
            let g = d_q.data()[base + k];
            let r = routes[base + k];
            if g == 0.0 || r == NO_ROUTE || is_sentinel(q.data()[base + k]) {
                continue;
            }
            ds[k] += g;
            dh[r as usize] += g;
        }
    });
    Ok(d_half)
}

/// Gathers `dQ_{l+1}` from `dQ_{l+1/2}` along the winning corner routes.
pub fn disaggregate_backward(
    d_half: &ScoreMap,
    half: &ScoreMap,
    routes: &[u8],
    geom: &LevelGeometry,
    coarse_stage: Stage,
) -> Result<ScoreMap> {
    if !d_half.same_shape(half) || routes.len() != half.data().len() {
        return Err(Error::shape("disaggregate backward inputs disagree"));
    }
    let shifts = geom.aggregation_shifts();
    let n = half.slice_len();
    let cols = half.cols();
    let mut d_coarse = ScoreMap::filled(half.rows(), cols, half.range(), coarse_stage, 0.0);
    for_each_chunk(d_coarse.data_mut(), n, |cell, dst| {
        let parent = [(cell / cols) as i64, (cell % cols) as i64];
        for (c, s) in shifts.iter().enumerate() {
            let child = [parent[0] + s[0], parent[1] + s[1]];
            if !half.contains_cell(child) {
                continue;
            }
            let off = half.cell_index([child[0] as usize, child[1] as usize]) * n;
            for (k, d) in dst.iter_mut().enumerate() {
                let r = routes[off + k];
                if r != NO_CORNER && r as usize == c {
                    *d += d_half.data()[off + k];
                }
            }
        }
    });
    Ok(d_coarse)
}

/// Adds the pooled gradient to `dS_l` at the switch locations.
pub fn pool_backward(d_pooled: &ScoreMap, switches: &PoolSwitches, d_s: &mut ScoreMap) -> Result<()> {
    if d_pooled.span() != switches.out_span() || d_s.span() != switches.in_span() {
        return Err(Error::shape("pool backward inputs disagree with the switches"));
    }
    let np = d_pooled.slice_len();
    let n = d_s.slice_len();
    for_each_chunk(d_s.data_mut(), n, |cell, ds| {
        let g = &d_pooled.data()[cell * np..(cell + 1) * np];
        for (s, gv) in switches.cell(cell).iter().zip(g) {
            if *s != NO_SWITCH && *gv != 0.0 {
                ds[*s as usize] += *gv;
            }
        }
    });
    Ok(())
}

/// Backward of `S_{l+1} = (avg of 4 corner slices)^nu`. Returns the pooled
/// gradient and `dL/d nu`.
pub fn aggregate_backward(
    d_out: &ScoreMap,
    out: &ScoreMap,
    pre: &ScoreMap,
    pooled: &ScoreMap,
    exponent: f64,
    geom: &LevelGeometry,
) -> Result<(ScoreMap, f64)> {
    if !d_out.same_shape(out) || !pre.same_shape(out) {
        return Err(Error::shape("aggregate backward inputs disagree"));
    }
    let n = out.slice_len();
    let cols = out.cols();
    let mut d_pre = vec![0.0; out.data().len()];
    let mut d_nu_cells = vec![0.0; out.rows() * cols];
    crate::par::for_each_chunk2(&mut d_pre, n, &mut d_nu_cells, 1, |cell, dp, dnu| {
        let base = cell * n;
        let mut acc = 0.0;
        for k in 0..n {
            let g = d_out.data()[base + k];
            let x = pre.data()[base + k];
            if g == 0.0 || x <= 0.0 {
                continue;
            }
            let y = out.data()[base + k];
            dp[k] = g * exponent * x.powf(exponent - 1.0);
            acc += g * y * x.ln();
        }
        dnu[0] = acc;
    });
    let d_nu = d_nu_cells.iter().sum();
    let shifts = geom.aggregation_shifts();
    let mut d_pooled = ScoreMap::filled(pooled.rows(), cols, pooled.range(), pooled.stage(), 0.0);
    for_each_chunk(d_pooled.data_mut(), n, |cell, dst| {
        let child = [(cell / cols) as i64, (cell % cols) as i64];
        let src = &pooled.data()[cell * n..(cell + 1) * n];
        for s in &shifts {
            let parent = [child[0] - s[0], child[1] - s[1]];
            if !out.contains_cell(parent) {
                continue;
            }
            let off = out.cell_index([parent[0] as usize, parent[1] as usize]) * n;
            for (k, d) in dst.iter_mut().enumerate() {
                if !is_sentinel(src[k]) {
                    *d += 0.25 * d_pre[off + k];
                }
            }
        }
    });
    Ok((d_pooled, d_nu))
}

/// Gradient w.r.t. both descriptor fields of `S_0 = max(0, <phi_p, phi_q>)`;
/// passes only where the correlation was strictly positive.
pub fn correlate_backward(
    d_s0: &ScoreMap,
    s0: &ScoreMap,
    reference: &DescriptorField,
    target: &DescriptorField,
    geom: &LevelGeometry,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !d_s0.same_shape(s0) {
        return Err(Error::shape("correlation backward inputs disagree"));
    }
    let dim = reference.dim;
    let span = geom.span();
    let n = s0.slice_len();
    let cols = s0.cols();
    let target_cells = |cell: usize| {
        let i = [cell / cols, cell % cols];
        let p = geom.ref_coord_unchecked(i);
        (0..n).map(move |k| {
            let q = geom.target_coord([k / span, k % span], p).expect("k within span");
            target.cell_at(q)
        })
    };
    let mut d_ref = vec![0.0; reference.values.len()];
    for_each_chunk(&mut d_ref, dim, |cell, dr| {
        for (k, t) in target_cells(cell).enumerate() {
            let g = d_s0.data()[cell * n + k];
            if g == 0.0 || !(s0.data()[cell * n + k] > 0.0) {
                continue;
            }
            let t = t.expect("positive score has a target");
            for (a, b) in dr.iter_mut().zip(target.get(t)) {
                *a += g * b;
            }
        }
    });
    // Reference cells overlap in the target cells they touch; accumulate in
    // a fixed sequential order.
    let mut d_tgt = vec![0.0; target.values.len()];
    for cell in 0..s0.rows() * cols {
        let phi_p = reference.get([cell / cols, cell % cols]);
        for (k, t) in target_cells(cell).enumerate() {
            let g = d_s0.data()[cell * n + k];
            if g == 0.0 || !(s0.data()[cell * n + k] > 0.0) {
                continue;
            }
            let t = t.expect("positive score has a target");
            let off = (t[0] * target.grid.cols + t[1]) * dim;
            for (a, b) in d_tgt[off..off + dim].iter_mut().zip(phi_p) {
                *a += g * b;
            }
        }
    }
    Ok((d_ref, d_tgt))
}

/// Backpropagates `d_map` (the loss gradient w.r.t. the attachment map) to
/// the exponents, score maps, descriptors, and extractor weights.
pub fn backward(
    tape: GradTape,
    attachment: Attachment,
    d_map: &ScoreMap,
    params: Option<&ExtractorParams>,
) -> Result<Gradients> {
    let map = tape.attachment_map(attachment)?;
    if !d_map.same_shape(map) {
        return Err(Error::shape("gradient does not match the attachment map"));
    }
    let pyr = &tape.pyramid;
    let levels = pyr.levels();
    let mut d_scores: Vec<ScoreMap> = pyr
        .scores
        .iter()
        .map(|s| ScoreMap::filled(s.rows(), s.cols(), s.range(), s.stage(), 0.0))
        .collect();

    match attachment {
        Attachment::Score(a) => {
            for (d, (g, s)) in d_scores[a]
                .data_mut()
                .iter_mut()
                .zip(d_map.data().iter().zip(pyr.scores[a].data()))
            {
                if !is_sentinel(*s) {
                    *d = *g;
                }
            }
        }
        Attachment::Decoded(a) => {
            let dec = tape.decoded.as_ref().ok_or(Error::MissingCache("decoder state"))?;
            let mut d_q = d_map.clone();
            for l in a..levels {
                let d_half =
                    unpool_backward(&d_q, &dec.maps[l], &dec.unpool_routes[l], &dec.half[l], &mut d_scores[l])?;
                let geom = pyr.level_geometry(l);
                d_q = disaggregate_backward(
                    &d_half,
                    &dec.half[l],
                    &dec.corner_routes[l],
                    &geom,
                    Stage::Full(l + 1),
                )?;
            }
            // Q_L = S_L.
            for (d, (g, q)) in d_scores[levels]
                .data_mut()
                .iter_mut()
                .zip(d_q.data().iter().zip(dec.maps[levels].data()))
            {
                if !is_sentinel(*q) {
                    *d += *g;
                }
            }
        }
    }

    let top = attachment.level().max(if attachment.needs_decoder() { levels } else { 0 });
    let mut d_exponents = vec![0.0; levels];
    for l in (0..top).rev() {
        let geom = pyr.level_geometry(l);
        let (d_pooled, d_nu) = aggregate_backward(
            &d_scores[l + 1],
            &pyr.scores[l + 1],
            &pyr.prepower[l],
            &pyr.pooled[l],
            pyr.exponents[l],
            &geom,
        )?;
        d_exponents[l] = d_nu;
        pool_backward(&d_pooled, &pyr.switches[l], &mut d_scores[l])?;
    }

    let geom0 = pyr.level_geometry(0);
    let (d_ref, d_tgt) =
        correlate_backward(&d_scores[0], &pyr.scores[0], &tape.reference, &tape.target, &geom0)?;

    let extractor = match (params, &tape.reference_cache, &tape.target_cache) {
        (Some(p), Some(rc), Some(tc)) => {
            let mut g = p.zeros_like();
            extract_backward(&d_ref, rc, p, &mut g)?;
            extract_backward(&d_tgt, tc, p, &mut g)?;
            Some(g)
        }
        (Some(_), _, _) => return Err(Error::MissingCache("extractor activations")),
        (None, _, _) => None,
    };

    Ok(Gradients {
        exponents: d_exponents,
        scores: d_scores,
        reference: d_ref,
        target: d_tgt,
        extractor,
    })
}

#[cfg(test)]
mod tests;
