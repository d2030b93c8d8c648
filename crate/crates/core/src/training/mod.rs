//! Structured loss, regularized objective, and the momentum SGD trainer.

pub mod checkpoint;
mod loss;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use loss::{gaussian_margin, structured_loss, GroundTruthField, LossOutput};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{backward, Attachment, GradTape};
use crate::descriptors::{ExtractorParams, GrayImage};
use crate::error::{Error, Result};
use crate::matching::{accuracy_at_t, coverage, epe, EpeMask, FlowField};
use crate::pipeline::{match_images, Model};

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub image0: GrayImage,
    pub image1: GrayImage,
    pub flow: FlowField,
}

/// How a pair's score map is turned into a loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub attachment: Attachment,
    /// Margin bandwidth in pixels.
    pub sigma: f64,
    /// Divide each pair's loss by its number of scored cells.
    pub normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            attachment: Attachment::Decoded(0),
            sigma: 8.0,
            normalize: true,
        }
    }
}

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub exponents: bool,
    pub descriptor: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_exponents: f64,
    pub lr_descriptor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Total epochs; training resumes until this many are done.
    pub epochs: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub groups: ParamGroups,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Exponents are clamped to at least this value after each step.
    pub min_exponent: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_exponents: 1e-3,
            lr_descriptor: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 1,
            loss: LossConfig::default(),
            seed: 0,
            groups: ParamGroups {
                exponents: true,
                descriptor: true,
            },
            checkpoint_every: 0,
            min_exponent: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_exponents", self.lr_exponents), ("lr_descriptor", self.lr_descriptor)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.loss.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.loss.sigma)));
        }
        if !(self.min_exponent > 0.0) {
            return Err(Error::config(format!("min_exponent must be positive, got {}", self.min_exponent)));
        }
        Ok(())
    }
}

/// Loss of one pair together with what the backward pass needs.
pub struct PairForward {
    pub tape: GradTape,
    pub output: LossOutput,
    /// Factor applied to the raw loss and its gradient.
    pub scale: f64,
}

impl PairForward {
    pub fn loss(&self) -> f64 {
        self.output.loss * self.scale
    }
}

pub fn pair_forward(model: &Model, sample: &PairSample, cfg: &LossConfig) -> Result<PairForward> {
    let tape = model.forward_for(&sample.image0, &sample.image1, cfg.attachment)?;
    let map = tape.attachment_map(cfg.attachment)?;
    let geom = tape.pyramid.level_geometry(cfg.attachment.level());
    let gt = GroundTruthField::from_flow(&sample.flow, &geom, cfg.sigma)?;
    let output = structured_loss(map, &gt)?;
    let scale = if cfg.normalize && output.scored_cells > 0 {
        1.0 / output.scored_cells as f64
    } else {
        1.0
    };
    Ok(PairForward { tape, output, scale })
}

/// Mean pair loss without gradients.
pub fn mean_loss(model: &Model, samples: &[PairSample], cfg: &LossConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("no samples to evaluate"));
    }
    let mut total = 0.0;
    for s in samples {
        total += pair_forward(model, s, cfg)?.loss();
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    /// Mean data loss plus weight decay.
    pub value: f64,
    pub data_loss: f64,
    pub grad_exponents: Vec<f64>,
    pub grad_extractor: Option<ExtractorParams>,
}

/// `lambda/2 |w|^2 + mean_pairs loss` over the enabled parameter groups,
/// with gradients.
pub fn objective(
    batch: &[PairSample],
    model: &Model,
    cfg: &LossConfig,
    weight_decay: f64,
    groups: ParamGroups,
) -> Result<ObjectiveValue> {
    if batch.is_empty() {
        return Err(Error::config("objective needs at least one pair"));
    }
    let n = batch.len() as f64;
    let params = model.extractor.params();
    let mut data_loss = 0.0;
    let mut grad_exponents = vec![0.0; model.exponents.len()];
    let mut grad_extractor = params.map(|p| p.zeros_like());
    for sample in batch {
        let fwd = pair_forward(model, sample, cfg)?;
        data_loss += fwd.loss() / n;
        let scale = fwd.scale / n;
        let mut d_map = fwd.output.grad;
        d_map.data_mut().iter_mut().for_each(|g| *g *= scale);
        let grads = backward(fwd.tape, cfg.attachment, &d_map, params)?;
        for (a, b) in grad_exponents.iter_mut().zip(&grads.exponents) {
            *a += b;
        }
        if let (Some(acc), Some(g)) = (grad_extractor.as_mut(), grads.extractor.as_ref()) {
            acc.add_scaled(g, 1.0);
        }
    }
    let mut value = data_loss;
    if weight_decay > 0.0 {
        if groups.exponents {
            value += 0.5 * weight_decay * model.exponents.iter().map(|w| w * w).sum::<f64>();
            for (g, w) in grad_exponents.iter_mut().zip(&model.exponents) {
                *g += weight_decay * w;
            }
        }
        if let (true, Some(p), Some(g)) = (groups.descriptor, params, grad_extractor.as_mut()) {
            value += 0.5 * weight_decay * p.squared_norm();
            g.add_scaled(p, weight_decay);
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    Ok(ObjectiveValue {
        value,
        data_loss,
        grad_exponents,
        grad_extractor,
    })
}

/// Momentum buffers and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub velocity_exponents: Vec<f64>,
    pub velocity_extractor: Vec<f64>,
    pub epochs_done: u64,
    pub steps_done: u64,
}

impl TrainerState {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity_exponents: vec![0.0; model.exponents.len()],
            velocity_extractor: vec![0.0; model.extractor.params().map_or(0, |p| p.len())],
            epochs_done: 0,
            steps_done: 0,
        }
    }

    pub fn to_checkpoint(&self, model: &Model) -> Checkpoint {
        Checkpoint {
            params: vec![
                model.exponents.clone(),
                model.extractor.params().map(|p| p.to_flat()).unwrap_or_default(),
            ],
            velocity: vec![self.velocity_exponents.clone(), self.velocity_extractor.clone()],
            epochs_done: self.epochs_done,
            steps_done: self.steps_done,
        }
    }

    /// Loads parameters into `model` and returns the optimizer state.
    pub fn from_checkpoint(ckpt: &Checkpoint, model: &mut Model) -> Result<Self> {
        let mismatch = |m: String| Error::from(CheckpointError::Mismatch(m));
        if ckpt.params.len() != 2 {
            return Err(mismatch(format!("expected 2 parameter groups, found {}", ckpt.params.len())));
        }
        if ckpt.params[0].len() != model.exponents.len() {
            return Err(mismatch(format!(
                "{} exponents in checkpoint, model has {} levels",
                ckpt.params[0].len(),
                model.exponents.len()
            )));
        }
        let want = model.extractor.params().map_or(0, |p| p.len());
        if ckpt.params[1].len() != want {
            return Err(mismatch(format!(
                "{} extractor weights in checkpoint, model has {want}",
                ckpt.params[1].len()
            )));
        }
        model.exponents = ckpt.params[0].clone();
        if let Some(p) = model.extractor.params_mut() {
            p.set_flat(&ckpt.params[1])?;
        }
        model.validate()?;
        Ok(Self {
            velocity_exponents: ckpt.velocity[0].clone(),
            velocity_extractor: ckpt.velocity[1].clone(),
            epochs_done: ckpt.epochs_done,
            steps_done: ckpt.steps_done,
        })
    }
}

/// Applies one momentum step `v <- mu v - lr g; w <- w + v` on one pair.
/// Returns the pair objective before the update.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainerState,
    sample: &PairSample,
    config: &TrainConfig,
) -> Result<f64> {
    let obj = objective(
        std::slice::from_ref(sample),
        model,
        &config.loss,
        config.weight_decay,
        config.groups,
    )?;
    if !obj.data_loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let mu = config.momentum;
    if config.groups.exponents {
        for ((w, v), g) in model
            .exponents
            .iter_mut()
            .zip(&mut state.velocity_exponents)
            .zip(&obj.grad_exponents)
        {
            *v = mu * *v - config.lr_exponents * g;
            *w = (*w + *v).max(config.min_exponent);
        }
    }
    if let (true, Some(p), Some(g)) = (
        config.groups.descriptor,
        model.extractor.params_mut(),
        obj.grad_extractor.as_ref(),
    ) {
        let grad = g.to_flat();
        let mut flat = p.to_flat();
        for ((w, v), g) in flat.iter_mut().zip(&mut state.velocity_extractor).zip(&grad) {
            *v = mu * *v - config.lr_descriptor * g;
            *w += *v;
        }
        p.set_flat(&flat)?;
    }
    state.steps_done += 1;
    Ok(obj.value)
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    /// Optimizer steps done at the end of the epoch.
    pub step: u64,
    /// Mean objective over the epoch's steps.
    pub loss: f64,
    pub val_acc2: Option<f64>,
    pub val_epe: Option<f64>,
    pub val_loss: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,step,loss,val_acc2,val_epe,val_loss";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{},{},{}",
            self.epoch,
            self.step,
            self.loss,
            opt(self.val_acc2),
            opt(self.val_epe),
            opt(self.val_loss)
        )
    }
}

/// Visiting order of the training pairs in `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Runs SGD with momentum until `config.epochs` epochs are done, resuming
/// from `state`. `on_step` sees `(step, objective)` after every update.
pub fn train(
    model: &mut Model,
    state: &mut TrainerState,
    train_set: &[PairSample],
    val_set: &[PairSample],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
    on_step: &mut dyn FnMut(u64, f64),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let n = train_set.len() as u64;
    let mut logs = Vec::new();
    while state.steps_done < config.epochs as u64 * n {
        let epoch = state.steps_done / n;
        let order = epoch_order(config.seed, epoch, train_set.len());
        let mut sum = 0.0;
        let mut count = 0usize;
        for &idx in &order[(state.steps_done % n) as usize..] {
            let value = train_step(model, state, &train_set[idx], config)?;
            sum += value;
            count += 1;
            on_step(state.steps_done, value);
            if let Some(path) = checkpoint {
                if config.checkpoint_every > 0 && state.steps_done % config.checkpoint_every as u64 == 0 {
                    state.to_checkpoint(model).save(path)?;
                }
            }
        }
        state.epochs_done = epoch + 1;
        let (val_acc2, val_epe, val_loss) = if val_set.is_empty() {
            (None, None, None)
        } else {
            let report = evaluate(model, val_set)?;
            (
                Some(report.accuracy(2.0)),
                report.epe,
                Some(mean_loss(model, val_set, &config.loss)?),
            )
        };
        logs.push(EpochLog {
            epoch: epoch + 1,
            step: state.steps_done,
            loss: sum / count.max(1) as f64,
            val_acc2,
            val_epe,
            val_loss,
        });
    }
    if let Some(path) = checkpoint {
        state.to_checkpoint(model).save(path)?;
    }
    Ok(logs)
}

/// Thresholds reported by [`evaluate`].
pub const ACCURACY_THRESHOLDS: [f64; 4] = [1.0, 2.0, 5.0, 10.0];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    /// Mean accuracy over pairs at each of [`ACCURACY_THRESHOLDS`].
    pub accuracy: [f64; 4],
    /// Mean dense EPE over pixels valid in both fields (pairs with no such pixel skipped).
    pub epe: Option<f64>,
    /// Mean EPE at verified match positions.
    pub epe_matches: Option<f64>,
    /// Mean fraction of ground-truth pixels with an estimate.
    pub coverage: f64,
    pub matches: usize,
    pub verified: usize,
}

impl EvalReport {
    pub fn accuracy(&self, t: f64) -> f64 {
        ACCURACY_THRESHOLDS
            .iter()
            .position(|x| *x == t)
            .map(|i| self.accuracy[i])
            .unwrap_or(f64::NAN)
    }
}

/// One evaluated pair: estimate, ground truth, and verified match pixels.
pub struct EvalItem {
    pub estimate: FlowField,
    pub truth: FlowField,
    pub match_pixels: Vec<[i64; 2]>,
    pub matches: usize,
}

pub fn evaluate_flows(items: &[EvalItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::config("nothing to evaluate"));
    }
    let mut accuracy = [0.0; 4];
    let (mut epe_sum, mut epe_n) = (0.0, 0usize);
    let (mut em_sum, mut em_n) = (0.0, 0usize);
    let mut cov = 0.0;
    let mut matches = 0;
    let mut verified = 0;
    for it in items {
        for (a, t) in accuracy.iter_mut().zip(ACCURACY_THRESHOLDS) {
            *a += accuracy_at_t(&it.estimate, &it.truth, t)?;
        }
        if let Ok(e) = epe(&it.estimate, &it.truth, EpeMask::Valid) {
            epe_sum += e;
            epe_n += 1;
        }
        if let Ok(e) = epe(&it.estimate, &it.truth, EpeMask::Pixels(&it.match_pixels)) {
            em_sum += e;
            em_n += 1;
        }
        cov += coverage(&it.estimate, &it.truth)?;
        matches += it.matches;
        verified += it.match_pixels.len();
    }
    let n = items.len() as f64;
    accuracy.iter_mut().for_each(|a| *a /= n);
    Ok(EvalReport {
        pairs: items.len(),
        accuracy,
        epe: (epe_n > 0).then(|| epe_sum / epe_n as f64),
        epe_matches: (em_n > 0).then(|| em_sum / em_n as f64),
        coverage: cov / n,
        matches,
        verified,
    })
}

/// Runs the full matcher on every pair and scores the densified flow.
pub fn evaluate(model: &Model, samples: &[PairSample]) -> Result<EvalReport> {
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let out = match_images(model, &s.image0, &s.image1)?;
        items.push(EvalItem {
            match_pixels: out.matches.matches.iter().filter(|m| m.verified).map(|m| m.p).collect(),
            matches: out.matches.len(),
            estimate: out.flow,
            truth: s.flow.clone(),
        });
    }
    evaluate_flows(&items)
}

#[cfg(test)]
mod tests;
