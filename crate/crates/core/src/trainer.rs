//! Supervised fine-tuning: Adam with global-norm clipping, seeded batching,
//! per-step and per-epoch losses, and a finite-difference gradient harness.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{pack_sequence, DatasetError, InstructRecord, LossMode, PackedSequence, SplitManifest};
use crate::model::{CausalLM, ModelError};
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training split is empty")]
    EmptyTrainSet,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `f64::INFINITY` disables clipping.
    pub grad_clip: f64,
    /// Decay the learning rate linearly to zero over the run.
    pub linear_decay: bool,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Stop at the end of the first epoch whose full training loss is at or below this.
    pub target_train_loss: Option<f64>,
}

impl Default for TrainConfig {
    /// Desk-scale settings: a tiny model needs a larger step than a
    /// pretrained one being nudged.
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 3,
            seed: 0,
            grad_clip: 1.0,
            linear_decay: false,
            max_steps: None,
            target_train_loss: None,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters reported for the large-scale run.
    pub fn paper() -> Self {
        Self { learning_rate: 2e-5, batch_size: 2, epochs: 3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::InvalidConfig(format!("grad_clip {} must be positive", self.grad_clip)));
        }
        Ok(())
    }
}

/// Adam moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state length differs");
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Mean loss of one optimizer batch.
    Train,
    /// Full training-set loss at an epoch boundary.
    TrainEval,
    Valid,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TrainEval => "train_eval",
            Split::Valid => "valid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn series(&self, split: Split) -> impl Iterator<Item = &LossPoint> {
        self.points.iter().filter(move |p| p.split == split)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.series(Split::Train).map(|p| p.loss).collect()
    }

    pub fn last(&self, split: Split) -> Option<f64> {
        self.series(split).last().map(|p| p.loss)
    }

    pub fn steps(&self) -> usize {
        self.series(Split::Train).count()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,split,loss")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.step, p.split.as_str(), p.loss)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Token-weighted mean loss over `seqs`, with the same masks as training.
pub fn evaluate_loss(model: &CausalLM, seqs: &[PackedSequence]) -> Result<f64, ModelError> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in seqs {
        let (l, c) = model.masked_nll(&s.ids, &s.loss_mask)?;
        sum += l;
        count += c;
    }
    if count == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Packs the train and validation records named by `manifest`.
pub fn pack_splits(
    records: &[InstructRecord],
    manifest: &SplitManifest,
    tok: &TokenizerModel,
    max_len: usize,
    mode: LossMode,
) -> Result<(Vec<PackedSequence>, Vec<PackedSequence>), DatasetError> {
    let pack = |idx: &[usize]| -> Result<Vec<PackedSequence>, DatasetError> {
        idx.iter()
            .map(|&i| {
                let rec = records.get(i).ok_or_else(|| DatasetError::InvalidRecord(format!("manifest index {i} out of range")))?;
                pack_sequence(rec, tok, max_len, mode)
            })
            .collect()
    };
    Ok((pack(&manifest.train)?, pack(&manifest.valid)?))
}

/// Trains in place. Batches are drawn from a per-epoch shuffle seeded by
/// `cfg.seed`; every update is rounded to storage precision so a saved
/// checkpoint reproduces the in-memory model exactly.
pub fn train_supervised(
    model: &mut CausalLM,
    train: &[PackedSequence],
    valid: &[PackedSequence],
    cfg: &TrainConfig,
) -> Result<LossCurve, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.num_params());
    let mut curve = LossCurve::default();
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let planned = cfg.max_steps.map_or(batches_per_epoch * cfg.epochs, |m| m.min(batches_per_epoch * cfg.epochs));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= planned {
                break 'epochs;
            }
            let mut grads = vec![0.0; model.num_params()];
            let count: usize = batch.iter().map(|&i| crate::model::scored_targets(&train[i].loss_mask)).sum();
            if count == 0 {
                return Err(ModelError::EmptyMask.into());
            }
            let mut sum = 0.0;
            for &i in batch {
                let s = &train[i];
                sum += model.accumulate_nll_grad(&s.ids, &s.loss_mask, 1.0 / count as f64, &mut grads)?.0;
            }
            let loss = sum / count as f64;
            step += 1;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { step, loss });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let lr = if cfg.linear_decay {
                cfg.learning_rate * (1.0 - (step - 1) as f64 / planned as f64)
            } else {
                cfg.learning_rate
            };
            adam_step(model.params_mut(), &grads, &mut adam, lr);
            model.round_to_storage();
            curve.points.push(LossPoint { step, split: Split::Train, loss });
        }
        let full = evaluate_loss(model, train)?;
        curve.points.push(LossPoint { step, split: Split::TrainEval, loss: full });
        if !valid.is_empty() {
            let v = evaluate_loss(model, valid)?;
            curve.points.push(LossPoint { step, split: Split::Valid, loss: v });
            log::info!("epoch {} step {step}: train {full:.4} valid {v:.4}", epoch + 1);
        } else {
            log::info!("epoch {} step {step}: train {full:.4}", epoch + 1);
        }
        if cfg.target_train_loss.is_some_and(|t| full <= t) {
            break;
        }
    }
    if curve.last(Split::TrainEval).is_none() || curve.points.last().is_some_and(|p| p.split == Split::Train) {
        // Stopped mid-epoch: still report where the model ended up.
        curve.points.push(LossPoint { step, split: Split::TrainEval, loss: evaluate_loss(model, train)? });
        if !valid.is_empty() {
            curve.points.push(LossPoint { step, split: Split::Valid, loss: evaluate_loss(model, valid)? });
        }
    }
    Ok(curve)
}

/// A scalar objective over a parameter vector with an analytic gradient.
pub trait Objective {
    fn num_params(&self) -> usize;
    fn param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, value: f64);
    fn loss(&self) -> f64;
    fn gradient(&self) -> Vec<f64>;
}

/// Mean masked cross-entropy of one packed sequence.
pub struct LmObjective<'a> {
    pub model: &'a mut CausalLM,
    pub packed: &'a PackedSequence,
}

impl Objective for LmObjective<'_> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn param(&self, i: usize) -> f64 {
        self.model.params()[i]
    }

    fn set_param(&mut self, i: usize, value: f64) {
        self.model.params_mut()[i] = value;
    }

    fn loss(&self) -> f64 {
        self.model.lm_loss(self.packed).expect("objective inputs were validated").0
    }

    fn gradient(&self) -> Vec<f64> {
        self.model.lm_loss(self.packed).expect("objective inputs were validated").1
    }
}

/// Denominator floor for relative error. Central differences at step `h` carry
/// O(h²) truncation error; below this magnitude the comparison is absolute.
pub const FD_REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// Compares the analytic gradient against central differences at `indices`
/// (every parameter when `None`). Parameters are restored afterwards.
pub fn finite_diff_check<O: Objective>(obj: &mut O, indices: Option<&[usize]>, step: f64) -> FdReport {
    let grad = obj.gradient();
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..obj.num_params()).collect();
            &all
        }
    };
    let mut report = FdReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for &i in idx {
        let orig = obj.param(i);
        obj.set_param(i, orig + step);
        let up = obj.loss();
        obj.set_param(i, orig - step);
        let down = obj.loss();
        obj.set_param(i, orig);
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(grad[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report = FdReport { max_rel_error: err, worst_index: i, analytic: grad[i], numeric, checked: report.checked };
        }
        report.checked += 1;
    }
    report
}

/// `count` distinct parameter indices drawn with `seed`, sorted.
pub fn sample_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, count.min(n)).into_vec();
    idx.sort_unstable();
    idx
}
