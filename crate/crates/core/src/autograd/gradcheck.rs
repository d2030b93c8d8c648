//! Central finite-difference checks of the analytic gradient.
//!
//! The loss is piecewise smooth: max operators, ReLUs and hinges switch
//! branches at ties. A parameter whose perturbation changes any recorded
//! decision is reported as tie-skipped instead of being compared.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::decoder::min_decode_gap;
use crate::error::{Error, Result};
use crate::pipeline::Model;
use crate::training::{objective, pair_forward, LossConfig, PairSample, ParamGroups};

/// One scalar parameter of a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamId {
    /// `nu_{l+1}` (zero-based index into `Model::exponents`).
    Exponent(usize),
    /// Flat index into the trainable extractor weights.
    Extractor(usize),
}

impl ParamId {
    pub fn get(&self, model: &Model) -> Result<f64> {
        match *self {
            ParamId::Exponent(i) => model
                .exponents
                .get(i)
                .copied()
                .ok_or_else(|| Error::config(format!("no exponent {i}"))),
            ParamId::Extractor(i) => match model.extractor.params() {
                Some(p) if i < p.len() => Ok(p.get_flat(i)),
                _ => Err(Error::config(format!("no extractor weight {i}"))),
            },
        }
    }

    pub fn set(&self, model: &mut Model, value: f64) -> Result<()> {
        self.get(model)?;
        match *self {
            ParamId::Exponent(i) => model.exponents[i] = value,
            ParamId::Extractor(i) => model
                .extractor
                .params_mut()
                .expect("checked above")
                .set_flat_at(i, value),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Instances whose smallest decision gap is below this are rejected by
    /// [`find_tie_free_instance`].
    pub min_gap: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-5,
            min_gap: 1e-6,
        }
    }
}

/// A model, an image pair, and how the loss is attached.
#[derive(Clone, Debug)]
pub struct GradcheckInstance {
    pub model: Model,
    pub sample: PairSample,
    pub loss: LossConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradEntry {
    pub param: ParamId,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a - n| / max(|a|, |n|, floor)`; zero when tie-skipped.
    pub rel_error: f64,
    pub tie_skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradEntry>,
}

impl GradcheckReport {
    pub fn checked(&self) -> usize {
        self.entries.iter().filter(|e| !e.tie_skipped).count()
    }

    pub fn skipped(&self) -> usize {
        self.entries.len() - self.checked()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| !e.tie_skipped)
            .fold(0.0, |m, e| m.max(e.rel_error))
    }
}

/// Hash of every discrete decision of the forward pass and the loss, and
/// the smallest margin by which any of them was taken.
pub fn decision_fingerprint(model: &Model, sample: &PairSample, loss: &LossConfig) -> Result<(u64, f64)> {
    let fwd = pair_forward(model, sample, loss)?;
    let tape = &fwd.tape;
    let mut h = DefaultHasher::new();
    let mut gap = fwd.output.min_hinge_gap;
    for cache in [&tape.reference_cache, &tape.target_cache].into_iter().flatten() {
        cache.hash_decisions(&mut h);
        gap = gap.min(cache.min_relu_margin()).min(cache.min_pool_gap());
    }
    for s in tape.pyramid.scores[0].data() {
        h.write_u8((*s > 0.0) as u8);
        if *s > 0.0 {
            gap = gap.min(*s);
        }
    }
    tape.pyramid.hash_decisions(&mut h);
    gap = gap.min(tape.pyramid.min_pool_gap());
    if let Some(dec) = &tape.decoded {
        dec.hash_decisions(&mut h);
        gap = gap.min(min_decode_gap(&tape.pyramid, dec));
    }
    h.write_u64(fwd.output.decision_hash);
    Ok((h.finish(), gap))
}

fn value(model: &Model, inst: &GradcheckInstance) -> Result<f64> {
    Ok(pair_forward(model, &inst.sample, &inst.loss)?.loss())
}

/// Compares the analytic gradient of the (unregularized) pair loss with
/// central differences for each parameter in `params`.
pub fn gradcheck(inst: &GradcheckInstance, params: &[ParamId], cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let groups = ParamGroups {
        exponents: true,
        descriptor: true,
    };
    let obj = objective(std::slice::from_ref(&inst.sample), &inst.model, &inst.loss, 0.0, groups)?;
    let (base_fp, _) = decision_fingerprint(&inst.model, &inst.sample, &inst.loss)?;
    let mut entries = Vec::with_capacity(params.len());
    for &param in params {
        let analytic = match param {
            ParamId::Exponent(i) => obj.grad_exponents[i],
            ParamId::Extractor(i) => obj
                .grad_extractor
                .as_ref()
                .ok_or_else(|| Error::config("model has no trainable extractor"))?
                .get_flat(i),
        };
        let w = param.get(&inst.model)?;
        let mut model = inst.model.clone();
        let mut side = |delta: f64| -> Result<(f64, u64)> {
            param.set(&mut model, w + delta)?;
            let v = value(&model, inst)?;
            let (fp, _) = decision_fingerprint(&model, &inst.sample, &inst.loss)?;
            Ok((v, fp))
        };
        let (plus, fp_plus) = side(cfg.step)?;
        let (minus, fp_minus) = side(-cfg.step)?;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let tie_skipped = fp_plus != base_fp || fp_minus != base_fp;
        let rel_error = if tie_skipped {
            0.0
        } else {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor)
        };
        entries.push(GradEntry {
            param,
            analytic,
            numeric,
            rel_error,
            tie_skipped,
        });
    }
    Ok(GradcheckReport { entries })
}

/// Builds instances from successive seeds until one has every decision
/// taken by at least `cfg.min_gap`; gives up after `attempts` seeds.
pub fn find_tie_free_instance(
    build: impl Fn(u64) -> Result<GradcheckInstance>,
    first_seed: u64,
    attempts: usize,
    cfg: &GradcheckConfig,
) -> Result<(u64, GradcheckInstance)> {
    for seed in first_seed..first_seed + attempts as u64 {
        let inst = build(seed)?;
        let (_, gap) = decision_fingerprint(&inst.model, &inst.sample, &inst.loss)?;
        if gap >= cfg.min_gap {
            return Ok((seed, inst));
        }
    }
    Err(Error::config(format!(
        "no tie-free instance among {attempts} seeds starting at {first_seed}"
    )))
}
