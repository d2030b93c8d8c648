//! Match extraction, reciprocal verification, densification and metrics.

mod flow;

pub use flow::FlowField;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::LevelGeometry;
use crate::score::{is_sentinel, ScoreMap};

/// One quasi-dense correspondence. Pixels are `[row, col]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub p: [i64; 2],
    pub q: [i64; 2],
    pub confidence: f64,
    pub verified: bool,
}

impl Match {
    /// Displacement as `[u, v]` = (column, row).
    pub fn flow(&self) -> [f64; 2] {
        [(self.q[1] - self.p[1]) as f64, (self.q[0] - self.p[0]) as f64]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn verified_count(&self) -> usize {
        self.matches.iter().filter(|m| m.verified).count()
    }

    /// One line per match: `p_x p_y q_x q_y confidence verified`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.matches {
            writeln!(
                out,
                "{} {} {} {} {:?} {}",
                m.p[1], m.p[0], m.q[1], m.q[0], m.confidence, m.verified as u8
            )
            .expect("write to string");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut matches = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::config(format!("match list line {}: cannot parse {line:?}", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let int = |s: &str| s.parse::<i64>().map_err(|_| bad());
            let confidence: f64 = f[4].parse().map_err(|_| bad())?;
            let verified = match f[5] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            matches.push(Match {
                p: [int(f[1])?, int(f[0])?],
                q: [int(f[3])?, int(f[2])?],
                confidence,
                verified,
            });
        }
        Ok(Self { matches })
    }
}

/// Best displacement index per reference cell (first in raster order on
/// ties); cells whose slice is entirely SENTINEL are dropped.
pub fn extract(q0: &ScoreMap, geom: &LevelGeometry) -> Result<MatchSet> {
    check_level0(q0, geom)?;
    let span = q0.span();
    let mut matches = Vec::new();
    for i in q0.cells().collect::<Vec<_>>() {
        let mut best: Option<(usize, f64)> = None;
        for (k, &v) in q0.slice(i).iter().enumerate() {
            if !is_sentinel(v) && best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        if let Some((k, v)) = best {
            let p = geom.ref_coord(i)?;
            let q = geom.target_coord([k / span, k % span], p)?;
            matches.push(Match {
                p,
                q,
                confidence: v,
                verified: false,
            });
        }
    }
    Ok(MatchSet { matches })
}

fn check_level0(q0: &ScoreMap, geom: &LevelGeometry) -> Result<()> {
    if geom.level != 0
        || q0.rows() != geom.rows
        || q0.cols() != geom.cols
        || q0.range() != geom.range
    {
        return Err(Error::shape("score map does not match level-0 geometry"));
    }
    Ok(())
}

/// Reciprocal check: `p -> q` is verified iff no other reference cell whose
/// range covers `q` scores `q` strictly higher. Ties verify every participant.
pub fn verify(matches: &MatchSet, q0: &ScoreMap, geom: &LevelGeometry) -> Result<MatchSet> {
    check_level0(q0, geom)?;
    let b = &geom.base;
    let r = geom.range as i64;
    let reach = (r * b.gamma0) / b.alpha0 + 1;
    let mut out = matches.clone();
    for m in &mut out.matches {
        let own = m.confidence;
        let i0 = [(m.p[0] - b.beta0) / b.alpha0, (m.p[1] - b.beta0) / b.alpha0];
        let mut verified = true;
        'search: for a in i0[0] - reach..=i0[0] + reach {
            for c in i0[1] - reach..=i0[1] + reach {
                if !q0.contains_cell([a, c]) || [a, c] == i0 {
                    continue;
                }
                let cell = [a as usize, c as usize];
                let p2 = geom.ref_coord(cell)?;
                let d = [m.q[0] - p2[0], m.q[1] - p2[1]];
                if d.iter().any(|x| x.rem_euclid(b.gamma0) != 0) {
                    continue;
                }
                let k = [d[0] / b.gamma0 + r, d[1] / b.gamma0 + r];
                if k.iter().any(|x| *x < 0 || *x > 2 * r) {
                    continue;
                }
                let v = q0.get(cell, [k[0] as usize, k[1] as usize]);
                if !is_sentinel(v) && v > own {
                    verified = false;
                    break 'search;
                }
            }
        }
        m.verified = verified;
    }
    Ok(out)
}

/// Propagates verified matches to every pixel: each pixel takes the
/// displacement of the most confident verified match within L-infinity
/// distance `radius`, ties broken by smaller distance, then raster order.
pub fn densify(matches: &MatchSet, width: usize, height: usize, radius: usize) -> FlowField {
    let mut slot: Vec<Option<usize>> = vec![None; width * height];
    for (n, m) in matches.matches.iter().enumerate() {
        if !m.verified {
            continue;
        }
        let (r, c) = (m.p[0], m.p[1]);
        if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
            slot[r as usize * width + c as usize].get_or_insert(n);
        }
    }
    let rad = radius as i64;
    let mut flow = FlowField::invalid(width, height);
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            // (confidence, distance, raster position, match)
            let mut best: Option<(f64, i64, i64, usize)> = None;
            for r in (y - rad).max(0)..=(y + rad).min(height as i64 - 1) {
                for c in (x - rad).max(0)..=(x + rad).min(width as i64 - 1) {
                    let Some(n) = slot[(r * width as i64 + c) as usize] else {
                        continue;
                    };
                    let conf = matches.matches[n].confidence;
                    let dist = (r - y).abs().max((c - x).abs());
                    let raster = r * width as i64 + c;
                    let better = match best {
                        None => true,
                        Some((bc, bd, br, _)) => {
                            conf > bc || (conf == bc && (dist < bd || (dist == bd && raster < br)))
                        }
                    };
                    if better {
                        best = Some((conf, dist, raster, n));
                    }
                }
            }
            if let Some((_, _, _, n)) = best {
                flow.set(x as usize, y as usize, matches.matches[n].flow());
            }
        }
    }
    flow
}

fn check_extent(est: &FlowField, gt: &FlowField) -> Result<()> {
    if !est.same_extent(gt) {
        return Err(Error::shape(format!(
            "flow extents differ: {}x{} vs {}x{}",
            est.width(),
            est.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

fn endpoint_error(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Fraction of ground-truth-valid pixels whose estimate is within `t`
/// pixels (L2); invalid estimates count as wrong.
pub fn accuracy_at_t(est: &FlowField, gt: &FlowField, t: f64) -> Result<f64> {
    check_extent(est, gt)?;
    let mut total = 0usize;
    let mut good = 0usize;
    for px in 0..gt.len() {
        let Some(g) = gt.get_index(px) else { continue };
        total += 1;
        if est.get_index(px).is_some_and(|e| endpoint_error(e, g) <= t) {
            good += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(good as f64 / total as f64)
}

/// Which pixels enter the end-point error.
#[derive(Clone, Copy, Debug)]
pub enum EpeMask<'a> {
    /// Every pixel valid in both fields.
    Valid,
    /// Only the listed `[row, col]` pixels (e.g. quasi-dense match positions).
    Pixels(&'a [[i64; 2]]),
}

/// Mean end-point error over the mask, restricted to pixels valid in both fields.
pub fn epe(est: &FlowField, gt: &FlowField, mask: EpeMask<'_>) -> Result<f64> {
    check_extent(est, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut add = |px: usize| {
        if let (Some(e), Some(g)) = (est.get_index(px), gt.get_index(px)) {
            sum += endpoint_error(e, g);
            n += 1;
        }
    };
    match mask {
        EpeMask::Valid => (0..gt.len()).for_each(&mut add),
        EpeMask::Pixels(pixels) => {
            for p in pixels {
                if p[0] >= 0 && p[1] >= 0 && (p[0] as usize) < gt.height() && (p[1] as usize) < gt.width() {
                    add(p[0] as usize * gt.width() + p[1] as usize);
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Fraction of ground-truth-valid pixels that have an estimate.
pub fn coverage(est: &FlowField, gt: &FlowField) -> Result<f64> {
    check_extent(est, gt)?;
    let total = gt.valid_count();
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let covered = (0..gt.len())
        .filter(|&px| gt.get_index(px).is_some() && est.get_index(px).is_some())
        .count();
    Ok(covered as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometryConfig;
    use crate::score::{Stage, SENTINEL};

    fn geom(rows: usize, cols: usize, range: usize) -> LevelGeometry {
        GeometryConfig {
            levels: 0,
            range0: range,
            alpha0: 4,
            beta0: 2,
            gamma0: 1,
            delta0: 4,
            eta0: 1,
        }
        .level(0, rows, cols)
    }

    #[test]
    fn extract_picks_argmax_and_drops_sentinel_cells() {
        let g = geom(1, 3, 1);
        let mut m = ScoreMap::filled(1, 3, 1, Stage::Full(0), SENTINEL);
        m.set([0, 0], [2, 1], 0.4);
        m.set([0, 0], [0, 0], 0.3);
        m.set([0, 1], [1, 1], 0.2);
        m.set([0, 1], [0, 1], 0.2);
        let s = extract(&m, &g).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.matches[0].p, [2, 2]);
        assert_eq!(s.matches[0].q, [3, 2]);
        assert_eq!(s.matches[0].confidence, 0.4);
        // Tie between (0,1) and (1,1): first in raster order.
        assert_eq!(s.matches[1].q, [1, 6]);
    }

    #[test]
    fn verification_prefers_higher_score() {
        // Cells at p=(2,2) and p=(2,6); with R=4 both cover q=(2,4).
        let g = geom(1, 2, 4);
        let mut m = ScoreMap::filled(1, 2, 4, Stage::Full(0), 0.0);
        m.set([0, 0], [4, 6], 0.9);
        m.set([0, 1], [4, 2], 0.4);
        let s = verify(&extract(&m, &g).unwrap(), &m, &g).unwrap();
        assert_eq!(s.matches[0].q, [2, 4]);
        assert_eq!(s.matches[1].q, [2, 4]);
        assert!(s.matches[0].verified);
        assert!(!s.matches[1].verified);
        // Equal scores verify both.
        m.set([0, 1], [4, 2], 0.9);
        let s = verify(&extract(&m, &g).unwrap(), &m, &g).unwrap();
        assert_eq!(s.verified_count(), 2);
    }

    #[test]
    fn verification_is_vacuous_for_uncovered_targets() {
        // R=1: cell 1 at col 6 cannot reach q col 1.
        let g = geom(1, 2, 1);
        let mut m = ScoreMap::filled(1, 2, 1, Stage::Full(0), 0.0);
        m.set([0, 0], [1, 0], 0.5);
        let s = verify(&extract(&m, &g).unwrap(), &m, &g).unwrap();
        assert!(s.matches[0].verified);
    }

    fn single(p: [i64; 2], d: [i64; 2], conf: f64) -> Match {
        Match {
            p,
            q: [p[0] + d[0], p[1] + d[1]],
            confidence: conf,
            verified: true,
        }
    }

    #[test]
    fn densify_single_match_covers_radius() {
        let s = MatchSet {
            matches: vec![single([10, 10], [1, 2], 0.5)],
        };
        let f = densify(&s, 30, 30, 8);
        for y in 0..30 {
            for x in 0..30 {
                let inside = (2..=18).contains(&x) && (2..=18).contains(&y);
                assert_eq!(f.get(x, y), inside.then_some([2.0, 1.0]));
            }
        }
    }

    #[test]
    fn densify_prefers_confidence_over_distance() {
        let s = MatchSet {
            matches: vec![single([0, 0], [0, 1], 0.9), single([0, 6], [0, 3], 0.5)],
        };
        let f = densify(&s, 10, 1, 8);
        assert_eq!(f.get(6, 0), Some([1.0, 0.0]));
        // Beyond radius of the confident match only the other one remains.
        assert_eq!(f.get(9, 0), Some([3.0, 0.0]));
        let unverified = MatchSet {
            matches: vec![Match { verified: false, ..s.matches[0] }],
        };
        assert_eq!(densify(&unverified, 10, 1, 8).valid_count(), 0);
    }

    #[test]
    fn densify_ties_prefer_nearer_match() {
        let s = MatchSet {
            matches: vec![single([0, 0], [0, 1], 0.5), single([0, 4], [0, 3], 0.5)],
        };
        let f = densify(&s, 5, 1, 8);
        assert_eq!(f.get(1, 0), Some([1.0, 0.0]));
        assert_eq!(f.get(3, 0), Some([3.0, 0.0]));
        assert_eq!(f.get(2, 0), Some([1.0, 0.0]));
    }

    #[test]
    fn metrics() {
        let gt = FlowField::constant(4, 2, [1.0, -1.0]);
        assert_eq!(accuracy_at_t(&gt, &gt, 1.0).unwrap(), 1.0);
        assert_eq!(epe(&gt, &gt, EpeMask::Valid).unwrap(), 0.0);
        let off = FlowField::constant(4, 2, [4.0, 3.0]);
        assert_eq!(epe(&off, &FlowField::constant(4, 2, [1.0, -1.0]), EpeMask::Valid).unwrap(), 5.0);
        assert_eq!(accuracy_at_t(&FlowField::constant(4, 2, [3.0, -1.0]), &gt, 1.0).unwrap(), 0.0);
        let mut half = gt.clone();
        for x in 0..4 {
            half.set(x, 1, [1.0 + 2.0, -1.0]);
        }
        assert_eq!(accuracy_at_t(&half, &gt, 1.0).unwrap(), 0.5);
        assert_eq!(epe(&half, &gt, EpeMask::Valid).unwrap(), 1.0);
        assert_eq!(epe(&half, &gt, EpeMask::Pixels(&[[1, 0], [1, 3]])).unwrap(), 2.0);
        let mut missing = gt.clone();
        missing.invalidate(0, 0);
        assert_eq!(accuracy_at_t(&missing, &gt, 1.0).unwrap(), 7.0 / 8.0);
        assert_eq!(coverage(&missing, &gt).unwrap(), 7.0 / 8.0);
        assert!(matches!(
            accuracy_at_t(&gt, &FlowField::invalid(4, 2), 1.0),
            Err(Error::EmptyMask)
        ));
        assert!(accuracy_at_t(&gt, &FlowField::invalid(3, 2), 1.0).is_err());
    }

    #[test]
    fn match_list_roundtrip() {
        let s = MatchSet {
            matches: vec![
                single([4, 12], [-3, 7], 0.123456789012345),
                Match { verified: false, ..single([0, 0], [0, 0], 1e-300) },
            ],
        };
        assert_eq!(MatchSet::parse(&s.to_text()).unwrap(), s);
        assert!(MatchSet::parse("1 2 3").is_err());
        assert!(MatchSet::parse("1 2 3 4 0.5 2").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn accuracy_is_monotone_in_t(seed in 0u64..1000, t in 0.0f64..5.0) {
                let mut est = FlowField::invalid(6, 5);
                let gt = FlowField::constant(6, 5, [0.0, 0.0]);
                let mut s = seed;
                for px in 0..30 {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let a = (s >> 40) as f64 / (1u64 << 24) as f64 * 6.0;
                    est.set_index(px, [a, 0.0]);
                }
                let lo = accuracy_at_t(&est, &gt, t).unwrap();
                let hi = accuracy_at_t(&est, &gt, t + 0.5).unwrap();
                prop_assert!(lo <= hi);
            }

            #[test]
            fn extract_is_invariant_to_monotone_rescaling(seed in 0u64..1000) {
                let g = geom(2, 2, 2);
                let mut s = seed;
                let data: Vec<f64> = (0..4 * 25).map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 11) as f64 / (1u64 << 53) as f64
                }).collect();
                let m = ScoreMap::from_vec(2, 2, 2, Stage::Full(0), data.clone()).unwrap();
                let m2 = ScoreMap::from_vec(2, 2, 2, Stage::Full(0), data.iter().map(|v| 3.0 * v.powi(3) + 1.0).collect()).unwrap();
                let a = verify(&extract(&m, &g).unwrap(), &m, &g).unwrap();
                let b = verify(&extract(&m2, &g).unwrap(), &m2, &g).unwrap();
                for (x, y) in a.matches.iter().zip(&b.matches) {
                    prop_assert_eq!(x.q, y.q);
                    prop_assert_eq!(x.verified, y.verified);
                }
            }
        }
    }
}
