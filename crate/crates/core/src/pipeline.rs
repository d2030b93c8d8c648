//! End-to-end forward pass: descriptors, pyramid, decoder, matches.

use crate::autograd::{Attachment, GradTape};
use crate::decoder::decode;
use crate::descriptors::{Extractor, GrayImage, SampleGrid};
use crate::error::{Error, Result};
use crate::geometry::GeometryConfig;
use crate::matching::{densify, extract, verify, FlowField, MatchSet};
use crate::pyramid::build_pyramid;
use crate::score::ScoreMap;

/// Default per-level aggregation exponent.
pub const DEFAULT_EXPONENT: f64 = 1.4;
/// L-infinity radius used when densifying matches.
pub const DENSIFY_RADIUS: usize = 8;

/// Everything a forward pass depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub geometry: GeometryConfig,
    /// `nu_1 ... nu_L`.
    pub exponents: Vec<f64>,
    pub extractor: Extractor,
}

impl Model {
    pub fn new(geometry: GeometryConfig, extractor: Extractor) -> Self {
        Self {
            exponents: vec![DEFAULT_EXPONENT; geometry.levels],
            geometry,
            extractor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.exponents.len() != self.geometry.levels {
            return Err(Error::config(format!(
                "{} exponents given for {} levels",
                self.exponents.len(),
                self.geometry.levels
            )));
        }
        if let Some(e) = self.exponents.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return Err(Error::config(format!("exponents must be positive, got {e}")));
        }
        Ok(())
    }

    pub fn reference_grid(&self, image: &GrayImage) -> Result<SampleGrid> {
        let g = &self.geometry;
        SampleGrid::covering(image.width, image.height, g.alpha0, g.beta0)
    }

    pub fn target_grid(&self, image: &GrayImage) -> Result<SampleGrid> {
        let g = &self.geometry;
        SampleGrid::covering(image.width, image.height, g.gamma0, g.beta0.rem_euclid(g.gamma0))
    }

    /// Runs descriptors and the pyramid, and the decoder when `with_decoder`.
    pub fn forward(&self, image0: &GrayImage, image1: &GrayImage, with_decoder: bool) -> Result<GradTape> {
        self.validate()?;
        let (reference, reference_cache) = self.extractor.extract(image0, self.reference_grid(image0)?)?;
        let (target, target_cache) = self.extractor.extract(image1, self.target_grid(image1)?)?;
        if reference.grid.is_empty() {
            return Err(Error::config("image too small for a single reference cell"));
        }
        let pyramid = build_pyramid(&reference, &target, &self.geometry, &self.exponents)?;
        let decoded = if with_decoder { Some(decode(&pyramid)?) } else { None };
        Ok(GradTape {
            pyramid,
            decoded,
            reference,
            target,
            reference_cache,
            target_cache,
        })
    }

    pub fn forward_for(&self, image0: &GrayImage, image1: &GrayImage, attachment: Attachment) -> Result<GradTape> {
        self.forward(image0, image1, attachment.needs_decoder())
    }
}

#[derive(Clone, Debug)]
pub struct MatchOutput {
    pub matches: MatchSet,
    pub flow: FlowField,
    pub q0: ScoreMap,
    pub reference_cells: usize,
}

/// Full matching pipeline: forward, extract, verify, densify.
pub fn match_images(model: &Model, image0: &GrayImage, image1: &GrayImage) -> Result<MatchOutput> {
    let tape = model.forward(image0, image1, true)?;
    let geom = tape.pyramid.level_geometry(0);
    let q0 = tape.decoded.expect("decoder requested").maps.swap_remove(0);
    let matches = verify(&extract(&q0, &geom)?, &q0, &geom)?;
    let flow = densify(&matches, image0.width, image0.height, DENSIFY_RADIUS);
    Ok(MatchOutput {
        reference_cells: geom.rows * geom.cols,
        matches,
        flow,
        q0,
    })
}
