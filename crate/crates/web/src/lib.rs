//! Browser demo: generate a synthetic pair, match it, and score the result.
//!
//! Every exported method takes and returns plain numbers and byte vectors, so
//! the same code runs natively under `cargo test`.

use deepmatch::descriptors::Extractor;
use deepmatch::io::{flow_to_color, generate_pair, ImageBuffer, MotionKind, SyntheticPair, SyntheticSpec, TextureKind};
use deepmatch::matching::{accuracy_at_t, coverage, epe, EpeMask, FlowField};
use deepmatch::pipeline::{match_images, Model};
use deepmatch::GeometryConfig;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Expands an RGB or gray buffer into canvas-ready RGBA.
fn to_rgba(image: &ImageBuffer) -> Vec<u8> {
    let c = image.channels();
    image
        .data()
        .chunks(c)
        .flat_map(|p| if c == 1 { [p[0], p[0], p[0], 255] } else { [p[0], p[1], p[2], 255] })
        .collect()
}

fn magnitude(flow: &FlowField) -> f64 {
    (0..flow.len())
        .filter_map(|i| flow.get_index(i))
        .map(|[u, v]| u.hypot(v))
        .fold(1.0, f64::max)
}

fn demo_geometry(levels: usize, range0: usize) -> GeometryConfig {
    GeometryConfig {
        levels,
        range0,
        alpha0: 4,
        beta0: 2,
        gamma0: 1,
        delta0: 4,
        eta0: 1,
    }
}

#[wasm_bindgen]
pub struct Demo {
    pair: SyntheticPair,
    estimate: Option<FlowField>,
    matches: usize,
}

#[wasm_bindgen]
impl Demo {
    /// Operation 1: a synthetic pair. `motion` is 0 translation, 1 affine, 2 warp.
    #[wasm_bindgen(constructor)]
    pub fn new(width: usize, height: usize, motion: u8, magnitude: f64, seed: u32) -> Result<Demo, String> {
        let m = magnitude.max(0.0).floor() as i64;
        let motion = match motion {
            0 => MotionKind::Translation {
                dx: (seed as i64 % (2 * m + 1)) - m,
                dy: ((seed / 7) as i64 % (2 * m + 1)) - m,
            },
            1 => MotionKind::Affine,
            _ => MotionKind::SmoothWarp,
        };
        let pair = generate_pair(&SyntheticSpec {
            width,
            height,
            texture: TextureKind::SmoothNoise,
            motion,
            magnitude,
            max_displacement: f64::INFINITY,
            seed: seed as u64,
        })
        .map_err(js_err)?;
        Ok(Demo {
            pair,
            estimate: None,
            matches: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.pair.image0.width()
    }

    pub fn height(&self) -> usize {
        self.pair.image0.height()
    }

    pub fn image0_rgba(&self) -> Vec<u8> {
        to_rgba(&self.pair.image0)
    }

    pub fn image1_rgba(&self) -> Vec<u8> {
        to_rgba(&self.pair.image1)
    }

    pub fn truth_rgba(&self) -> Result<Vec<u8>, String> {
        let flow = &self.pair.flow;
        Ok(to_rgba(&flow_to_color(flow, magnitude(flow)).map_err(js_err)?))
    }

    /// Operation 2: match with fixed descriptors; returns the match count.
    pub fn run_match(&mut self, levels: usize, range0: usize) -> Result<usize, String> {
        let model = Model::new(demo_geometry(levels, range0), Extractor::Fixed);
        model.validate().map_err(js_err)?;
        let out = match_images(&model, &(&self.pair.image0).into(), &(&self.pair.image1).into()).map_err(js_err)?;
        self.matches = out.matches.len();
        self.estimate = Some(out.flow);
        Ok(self.matches)
    }

    /// Flow estimate rendered on the ground-truth color scale.
    pub fn estimate_rgba(&self) -> Result<Vec<u8>, String> {
        let est = self.estimate.as_ref().ok_or_else(|| "run_match first".to_string())?;
        Ok(to_rgba(&flow_to_color(est, magnitude(&self.pair.flow)).map_err(js_err)?))
    }

    /// Operation 3: `[acc@1, acc@2, acc@5, EPE, coverage]`; EPE is NaN when undefined.
    pub fn metrics(&self) -> Result<Vec<f64>, String> {
        let est = self.estimate.as_ref().ok_or_else(|| "run_match first".to_string())?;
        let gt = &self.pair.flow;
        let mut out = Vec::with_capacity(5);
        for t in [1.0, 2.0, 5.0] {
            out.push(accuracy_at_t(est, gt, t).map_err(js_err)?);
        }
        out.push(epe(est, gt, EpeMask::Valid).unwrap_or(f64::NAN));
        out.push(coverage(est, gt).map_err(js_err)?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_round_trip() {
        let mut demo = Demo::new(48, 48, 0, 3.0, 11).unwrap();
        assert_eq!(demo.image0_rgba().len(), 48 * 48 * 4);
        assert!(demo.metrics().is_err());
        assert!(demo.run_match(2, 8).unwrap() > 0);
        assert_eq!(demo.estimate_rgba().unwrap().len(), 48 * 48 * 4);
        let m = demo.metrics().unwrap();
        assert_eq!(m.len(), 5);
        assert!(m[2] > 0.8, "{m:?}");
    }

    #[test]
    fn bad_geometry_is_reported() {
        let mut demo = Demo::new(32, 32, 2, 2.0, 1).unwrap();
        assert!(demo.run_match(2, 0).is_err());
    }
}
