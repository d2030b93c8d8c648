//! Structured hinge loss with a Gaussian margin.

use crate::error::{Error, Result};
use crate::geometry::LevelGeometry;
use crate::matching::FlowField;
use crate::par::for_each_chunk2;
use crate::score::{is_sentinel, ScoreMap};

/// `exp(-|q - q_true|^2 / (2 sigma^2))`.
pub fn gaussian_margin(q: [f64; 2], q_true: [f64; 2], sigma: f64) -> f64 {
    let d2 = (q[0] - q_true[0]).powi(2) + (q[1] - q_true[1]).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// True displacement index per reference cell at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthField {
    pub rows: usize,
    pub cols: usize,
    pub range: usize,
    /// Pixel distance between adjacent displacement indices.
    pub stride: f64,
    pub sigma: f64,
    pub targets: Vec<Option<[usize; 2]>>,
}

impl GroundTruthField {
    pub fn from_indices(geom: &LevelGeometry, sigma: f64, targets: Vec<Option<[usize; 2]>>) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {sigma}")));
        }
        if targets.len() != geom.rows * geom.cols {
            return Err(Error::shape("one ground-truth entry per reference cell required"));
        }
        if targets.iter().flatten().any(|k| k[0] >= geom.span() || k[1] >= geom.span()) {
            return Err(Error::shape("ground-truth index outside the displacement range"));
        }
        Ok(Self {
            rows: geom.rows,
            cols: geom.cols,
            range: geom.range,
            stride: geom.displacement_stride() as f64,
            sigma,
            targets,
        })
    }

    /// Snaps the flow at every reference pixel to the nearest displacement
    /// index; cells without flow or beyond the range are invalid.
    pub fn from_flow(flow: &FlowField, geom: &LevelGeometry, sigma: f64) -> Result<Self> {
        let mut targets = Vec::with_capacity(geom.rows * geom.cols);
        for r in 0..geom.rows {
            for c in 0..geom.cols {
                let p = geom.ref_coord([r, c])?;
                let inside = p[0] >= 0
                    && p[1] >= 0
                    && (p[0] as usize) < flow.height()
                    && (p[1] as usize) < flow.width();
                let k = inside
                    .then(|| flow.get(p[1] as usize, p[0] as usize))
                    .flatten()
                    .and_then(|[u, v]| geom.snap_displacement([v, u]));
                targets.push(k);
            }
        }
        Self::from_indices(geom, sigma, targets)
    }

    pub fn valid_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Plain sum of all active hinge terms.
    pub loss: f64,
    /// `dloss / dS`: +1 per active term at `(k|i)`, -1 per active term at `(k*|i)`.
    pub grad: ScoreMap,
    pub active_terms: usize,
    /// Cells that entered the loss (valid ground truth, scoreable `k*`).
    pub scored_cells: usize,
    /// Hash of the active set, for detecting hinge flips.
    pub decision_hash: u64,
    /// Smallest non-zero |hinge argument|.
    pub min_hinge_gap: f64,
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn value(&self) -> f64 {
        self.s + self.c
    }
}

/// `sum_i sum_k max(0, 1 - g(q - q*) + S(k|i) - S(k*|i))` over cells with
/// valid ground truth; SENTINEL scores never enter.
pub fn structured_loss(scores: &ScoreMap, gt: &GroundTruthField) -> Result<LossOutput> {
    if scores.rows() != gt.rows || scores.cols() != gt.cols || scores.range() != gt.range {
        return Err(Error::shape("ground truth does not match the score map geometry"));
    }
    let span = scores.span();
    let n = scores.slice_len();
    let cells = gt.rows * gt.cols;
    let mut grad = ScoreMap::filled(gt.rows, gt.cols, gt.range, scores.stage(), 0.0);
    // Per cell: (loss, compensation, active terms, hash, min gap, scored).
    let mut stats = vec![(0.0, 0.0, 0usize, 0u64, f64::INFINITY, false); cells];
    let two_s2 = 2.0 * gt.sigma * gt.sigma;
    for_each_chunk2(grad.data_mut(), n, &mut stats, 1, |cell, g, st| {
        let Some(ks) = gt.targets[cell] else { return };
        let slice = &scores.data()[cell * n..(cell + 1) * n];
        let kstar = ks[0] * span + ks[1];
        let s_true = slice[kstar];
        if is_sentinel(s_true) {
            return;
        }
        let mut sum = Sum::default();
        let mut active = 0usize;
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut gap = f64::INFINITY;
        for (k, &s) in slice.iter().enumerate() {
            if k == kstar || is_sentinel(s) {
                continue;
            }
            let dr = (k / span) as f64 - ks[0] as f64;
            let dc = (k % span) as f64 - ks[1] as f64;
            let d2 = gt.stride * gt.stride * (dr * dr + dc * dc);
            let arg = 1.0 - (-d2 / two_s2).exp() + s - s_true;
            if arg != 0.0 {
                gap = gap.min(arg.abs());
            }
            if arg > 0.0 {
                sum.add(arg);
                active += 1;
                g[k] += 1.0;
                hash = (hash ^ k as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        g[kstar] -= active as f64;
        st[0] = (sum.s, sum.c, active, hash, gap, true);
    });
    let mut total = Sum::default();
    let mut active_terms = 0;
    let mut scored_cells = 0;
    let mut decision_hash = 0xcbf2_9ce4_8422_2325u64;
    let mut min_hinge_gap = f64::INFINITY;
    for (cell, (s, c, a, h, gap, scored)) in stats.into_iter().enumerate() {
        if !scored {
            continue;
        }
        total.add(s);
        total.add(c);
        active_terms += a;
        scored_cells += 1;
        decision_hash = (decision_hash ^ h ^ cell as u64).wrapping_mul(0x0100_0000_01b3);
        min_hinge_gap = min_hinge_gap.min(gap);
    }
    Ok(LossOutput {
        loss: total.value(),
        grad,
        active_terms,
        scored_cells,
        decision_hash,
        min_hinge_gap,
    })
}
