//! `key = value` run configuration.

use std::path::Path;

use deepmatch::autograd::Attachment;
use deepmatch::descriptors::{Extractor, ExtractorParams};
use deepmatch::io::{MotionKind, SyntheticSpec, TextureKind};
use deepmatch::pipeline::{Model, DEFAULT_EXPONENT};
use deepmatch::training::{LossConfig, ParamGroups, TrainConfig};
use deepmatch::GeometryConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescriptorKind {
    Fixed,
    Trainable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenMotion {
    /// Random integer shift with components bounded by the magnitude.
    Translation,
    Affine,
    Warp,
}

/// Synthetic dataset settings used by `gen` and by `train`/`eval` without `--data`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    pub pairs: usize,
    pub width: usize,
    pub height: usize,
    pub texture: TextureKind,
    pub motion: GenMotion,
    pub magnitude: f64,
}

impl GenConfig {
    /// Spec of pair `index`; its seed and (for translations) its shift derive
    /// from `seed`.
    pub fn spec(&self, seed: u64, index: usize, max_displacement: f64) -> SyntheticSpec {
        let pair_seed = seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
        let motion = match self.motion {
            GenMotion::Affine => MotionKind::Affine,
            GenMotion::Warp => MotionKind::SmoothWarp,
            GenMotion::Translation => {
                let m = self.magnitude.floor() as i64;
                let span = (2 * m + 1) as u64;
                let h = pair_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 16;
                MotionKind::Translation {
                    dx: (h % span) as i64 - m,
                    dy: ((h / span) % span) as i64 - m,
                }
            }
        };
        SyntheticSpec {
            width: self.width,
            height: self.height,
            texture: self.texture,
            motion,
            magnitude: self.magnitude,
            max_displacement,
            seed: pair_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    /// One exponent per level.
    pub exponents: Vec<f64>,
    pub descriptor: DescriptorKind,
    pub cnn_widths: [usize; 3],
    /// Seed for weight init, shuffling and synthetic data.
    pub seed: u64,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub val_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let geometry = GeometryConfig::default();
        Self {
            exponents: vec![DEFAULT_EXPONENT; geometry.levels],
            geometry,
            descriptor: DescriptorKind::Fixed,
            cnn_widths: ExtractorParams::DEFAULT_WIDTHS,
            seed: 0,
            train: TrainConfig::default(),
            gen: GenConfig {
                pairs: 20,
                width: 64,
                height: 64,
                texture: TextureKind::SmoothNoise,
                motion: GenMotion::Translation,
                magnitude: 4.0,
            },
            val_pairs: 5,
        }
    }
}

const KEYS: &[&str] = &[
    "levels",
    "range0",
    "alpha0",
    "beta0",
    "gamma0",
    "delta0",
    "eta0",
    "exponents",
    "descriptor",
    "cnn_widths",
    "seed",
    "lr_exponents",
    "lr_descriptor",
    "momentum",
    "weight_decay",
    "epochs",
    "attachment",
    "sigma",
    "train_exponents",
    "train_descriptor",
    "checkpoint_every",
    "normalize_loss",
    "min_exponent",
    "gen_pairs",
    "gen_width",
    "gen_height",
    "gen_texture",
    "gen_motion",
    "gen_magnitude",
    "val_pairs",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let mut exponents: Option<Vec<f64>> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value, &mut exponents)?;
        }
        cfg.exponents = match exponents {
            Some(e) if e.len() == 1 => vec![e[0]; cfg.geometry.levels],
            Some(e) => e,
            None => vec![DEFAULT_EXPONENT; cfg.geometry.levels],
        };
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str, exponents: &mut Option<Vec<f64>>) -> Result<(), CliError> {
        let g = &mut self.geometry;
        let t = &mut self.train;
        match key {
            "levels" => g.levels = parse_num(key, value)?,
            "range0" => g.range0 = parse_num(key, value)?,
            "alpha0" => g.alpha0 = parse_num(key, value)?,
            "beta0" => g.beta0 = parse_num(key, value)?,
            "gamma0" => g.gamma0 = parse_num(key, value)?,
            "delta0" => g.delta0 = parse_num(key, value)?,
            "eta0" => g.eta0 = parse_num(key, value)?,
            "exponents" => *exponents = Some(parse_list(key, value)?),
            "descriptor" => {
                self.descriptor = match value {
                    "fixed" => DescriptorKind::Fixed,
                    "trainable" => DescriptorKind::Trainable,
                    _ => return Err(CliError::Config(format!("descriptor: expected fixed or trainable, got {value:?}"))),
                }
            }
            "cnn_widths" => {
                let w: Vec<usize> = parse_list(key, value)?;
                self.cnn_widths = w
                    .try_into()
                    .map_err(|_| CliError::Config("cnn_widths: expected three integers".into()))?;
            }
            "seed" => self.seed = parse_num(key, value)?,
            "lr_exponents" => t.lr_exponents = parse_num(key, value)?,
            "lr_descriptor" => t.lr_descriptor = parse_num(key, value)?,
            "momentum" => t.momentum = parse_num(key, value)?,
            "weight_decay" => t.weight_decay = parse_num(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "attachment" => t.loss.attachment = value.parse::<Attachment>()?,
            "sigma" => t.loss.sigma = parse_num(key, value)?,
            "train_exponents" => t.groups.exponents = parse_bool(key, value)?,
            "train_descriptor" => t.groups.descriptor = parse_bool(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(key, value)?,
            "normalize_loss" => t.loss.normalize = parse_bool(key, value)?,
            "min_exponent" => t.min_exponent = parse_num(key, value)?,
            "gen_pairs" => self.gen.pairs = parse_num(key, value)?,
            "gen_width" => self.gen.width = parse_num(key, value)?,
            "gen_height" => self.gen.height = parse_num(key, value)?,
            "gen_texture" => {
                self.gen.texture = match value {
                    "smooth" => TextureKind::SmoothNoise,
                    "checker" => TextureKind::CheckerNoise,
                    _ => return Err(CliError::Config(format!("gen_texture: expected smooth or checker, got {value:?}"))),
                }
            }
            "gen_motion" => {
                self.gen.motion = match value {
                    "translation" => GenMotion::Translation,
                    "affine" => GenMotion::Affine,
                    "warp" => GenMotion::Warp,
                    _ => {
                        return Err(CliError::Config(format!(
                            "gen_motion: expected translation, affine or warp, got {value:?}"
                        )))
                    }
                }
            }
            "gen_magnitude" => self.gen.magnitude = parse_num(key, value)?,
            "val_pairs" => self.val_pairs = parse_num(key, value)?,
            _ => unreachable!("key list and match arms agree"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.geometry.validate()?;
        if self.exponents.len() != self.geometry.levels {
            return Err(CliError::Config(format!(
                "exponents: {} values given for {} levels",
                self.exponents.len(),
                self.geometry.levels
            )));
        }
        if let Some(e) = self.exponents.iter().find(|e| !(**e > 0.0)) {
            return Err(CliError::Config(format!("exponents must be positive, got {e}")));
        }
        if self.cnn_widths.contains(&0) {
            return Err(CliError::Config("cnn_widths must be positive".into()));
        }
        if self.train.loss.attachment.level() > self.geometry.levels {
            return Err(CliError::Config(format!(
                "attachment {} exceeds the {} levels",
                self.train.loss.attachment, self.geometry.levels
            )));
        }
        if self.gen.width == 0 || self.gen.height == 0 || !(self.gen.magnitude >= 0.0) {
            return Err(CliError::Config("gen_width, gen_height must be positive and gen_magnitude >= 0".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Replaces the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn model(&self) -> Model {
        let extractor = match self.descriptor {
            DescriptorKind::Fixed => Extractor::Fixed,
            DescriptorKind::Trainable => Extractor::Trainable(ExtractorParams::init(self.cnn_widths, self.seed)),
        };
        let mut model = Model::new(self.geometry, extractor);
        model.exponents = self.exponents.clone();
        model
    }

    /// Largest displacement the level-0 range can score, in pixels.
    pub fn max_displacement(&self) -> f64 {
        (self.geometry.range0 as i64 * self.geometry.gamma0) as f64
    }

    pub fn loss(&self) -> LossConfig {
        self.train.loss
    }

    pub fn groups(&self) -> ParamGroups {
        self.train.groups
    }
}
