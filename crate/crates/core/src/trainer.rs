//! End-to-end optimization with the compound loss.

use std::io::Write;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{config_err, contract_err, Error, Result};
use crate::masker::{select, MaskConfig, MaskKind, MaskSelection};
use crate::model::{Logits, Model};
use crate::optim::{AdamW, CosineSchedule};
use crate::sampler::{build_clip_pair, build_inference_clip, ObservationRatio, SamplingConfig};
use crate::video::{Clip, LabeledVideo};

/// Batch size the base learning rate refers to.
pub const LR_REFERENCE_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_frac: f64,
    pub seed: u64,
    pub use_oracle: bool,
    pub use_l2: bool,
    pub l2_weight: f64,
    pub sampling: SamplingConfig,
    pub mask_kind: MaskKind,
    pub mask_k: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 0.05,
            batch_size: 16,
            steps: 5000,
            warmup_frac: 0.05,
            seed: 0,
            use_oracle: true,
            use_l2: false,
            l2_weight: 1.0,
            sampling: SamplingConfig::default(),
            mask_kind: MaskKind::Difference,
            mask_k: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero is allowed: a frozen run is the no-learning control.
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(config_err(format!("base_lr must be non-negative, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(config_err("warmup fraction must lie in [0, 1]"));
        }
        if self.weight_decay < 0.0 || self.l2_weight < 0.0 {
            return Err(config_err("weight decay and l2 weight must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.mask_k) {
            return Err(config_err(format!("mask ratio k={} outside [0, 1)", self.mask_k)));
        }
        self.sampling.validate()
    }

    /// `base_lr · batch_size / 256`.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / LR_REFERENCE_BATCH as f64
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule::new(self.effective_lr(), self.steps, self.warmup_frac)
    }
}

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossFlags {
    pub use_oracle: bool,
    pub use_l2: bool,
    pub l2_weight: f64,
}

impl From<&TrainConfig> for LossFlags {
    fn from(c: &TrainConfig) -> Self {
        Self { use_oracle: c.use_oracle, use_l2: c.use_l2, l2_weight: c.l2_weight }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_pred: f64,
    pub l_oracle: f64,
    pub l_l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `l_pred + use_oracle·l_oracle + use_l2·w·l_l2`, summed in that order.
    pub fn combine(l_pred: f64, l_oracle: f64, l_l2: f64, flags: LossFlags) -> Self {
        let mut total = l_pred;
        if flags.use_oracle {
            total += l_oracle;
        }
        if flags.use_l2 {
            total += flags.l2_weight * l_l2;
        }
        Self { l_pred, l_oracle, l_l2, total }
    }

    pub fn is_finite(&self) -> bool {
        self.l_pred.is_finite() && self.l_oracle.is_finite() && self.l_l2.is_finite() && self.total.is_finite()
    }

    fn add_scaled(&mut self, other: &Self, s: f64) {
        self.l_pred += s * other.l_pred;
        self.l_oracle += s * other.l_oracle;
        self.l_l2 += s * other.l_l2;
        self.total += s * other.total;
    }
}

/// Negative log-likelihood of `label` under softmax(logits).
pub fn nll(logits: &Logits, label: usize) -> Result<f64> {
    if logits.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {:?}", logits.0)));
    }
    if label >= logits.0.len() {
        return Err(contract_err(format!("label {label} out of range for {} classes", logits.0.len())));
    }
    let max = logits.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.0.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits.0[label])
}

/// Classification terms of the compound loss; the L2 term is left at zero.
pub fn compound_loss(y_pred: &Logits, y_oracle: &Logits, label: usize, flags: LossFlags) -> Result<LossBreakdown> {
    let l_pred = nll(y_pred, label)?;
    let l_oracle = if flags.use_oracle { nll(y_oracle, label)? } else { 0.0 };
    Ok(LossBreakdown::combine(l_pred, l_oracle, 0.0, LossFlags { use_l2: false, ..flags }))
}

/// Mean squared difference over all entries.
pub fn l2_alignment(forecast: ArrayView2<f64>, oracle_future: ArrayView2<f64>) -> Result<f64> {
    if forecast.dim() != oracle_future.dim() {
        return Err(contract_err(format!(
            "forecast {:?} and oracle future {:?} differ in shape",
            forecast.dim(),
            oracle_future.dim()
        )));
    }
    let n = forecast.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = forecast.iter().zip(oracle_future.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / n as f64)
}

/// Everything needed to evaluate the loss of one sample once the random
/// choices (ratio, masks) have been made.
pub struct PreparedSample {
    pub label: usize,
    pub rho: ObservationRatio,
    pub observed: Clip,
    pub sel_observed: MaskSelection,
    /// Absent when the whole video is visible.
    pub future: Option<(Clip, MaskSelection)>,
}

/// Draws ρ, builds the clip pair and masks each half independently.
pub fn prepare_sample(
    video: &LabeledVideo,
    sampling: &SamplingConfig,
    mask_kind: MaskKind,
    mask: &MaskConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedSample> {
    let rho = sampling.draw(rng);
    let label = video.label as usize;
    if rho.visible_frames(video.video.frames()) >= video.video.frames() {
        let observed = build_inference_clip(&video.video, rho, sampling)?;
        let sel_observed = select(mask_kind, &observed, mask, rng)?;
        return Ok(PreparedSample { label, rho, observed, sel_observed, future: None });
    }
    let pair = build_clip_pair(&video.video, rho, sampling)?;
    let sel_observed = select(mask_kind, &pair.observed, mask, rng)?;
    let sel_future = select(mask_kind, &pair.unobserved, mask, rng)?;
    Ok(PreparedSample {
        label,
        rho,
        observed: pair.observed,
        sel_observed,
        future: Some((pair.unobserved, sel_future)),
    })
}

/// Builds the compound loss of one sample on `tape` and returns its scalar
/// handle with the per-term values.
pub fn sample_loss(
    model: &Model,
    tape: &mut Tape,
    s: &PreparedSample,
    flags: LossFlags,
) -> Result<(Var, LossBreakdown)> {
    let pred = model.forward_pred(tape, &s.observed, &s.sel_observed)?;
    let l_pred = tape.cross_entropy(pred.logits, s.label);
    let mut total = l_pred;
    let (mut lo, mut ll2) = (0.0, 0.0);
    let mut active = LossFlags { use_oracle: false, use_l2: false, ..flags };
    if let Some((future, sel_future)) = &s.future {
        if flags.use_oracle || flags.use_l2 {
            let oracle = model.forward_oracle(tape, &s.observed, &s.sel_observed, future, sel_future)?;
            if flags.use_oracle {
                let l_oracle = tape.cross_entropy(oracle.logits, s.label);
                lo = tape.scalar(l_oracle);
                total = tape.add(total, l_oracle);
                active.use_oracle = true;
            }
            if flags.use_l2 {
                let steps = model.config().steps();
                let target = tape.gather_rows(oracle.pooled, (steps..2 * steps).collect());
                let diff = tape.sub(pred.forecast, target);
                let l2 = tape.mean_square(diff);
                ll2 = tape.scalar(l2);
                let weighted = tape.scale(l2, flags.l2_weight);
                total = tape.add(total, weighted);
                active.use_l2 = true;
            }
        }
    }
    let breakdown = LossBreakdown::combine(tape.scalar(l_pred), lo, ll2, active);
    if breakdown.total.to_bits() != tape.scalar(total).to_bits() {
        return Err(contract_err(format!(
            "loss terms {breakdown:?} do not add up to the graph total {}",
            tape.scalar(total)
        )));
    }
    Ok((total, breakdown))
}

/// Loss and parameter gradients of one prepared sample.
pub fn sample_gradients(model: &Model, s: &PreparedSample, flags: LossFlags) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::new(model.params());
    let (total, breakdown) = sample_loss(model, &mut tape, s, flags)?;
    Ok((breakdown, tape.backward(total)))
}

/// Per-sample generator: a pure function of (seed, step, slot).
pub fn sample_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 20) | slot as u64);
    rng
}

/// Optimizer state plus the deterministic batch order.
pub struct TrainState {
    pub model: Model,
    pub cfg: TrainConfig,
    optimizer: AdamW,
    schedule: CosineSchedule,
    step: usize,
    order_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,lr,l_pred,l_oracle,l_l2,total";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{}", self.step, self.lr, l.l_pred, l.l_oracle, l.l_l2, l.total)
    }
}

impl TrainState {
    pub fn new(model: Model, cfg: TrainConfig, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        if dataset_len == 0 {
            return Err(config_err("training set is empty"));
        }
        if cfg.sampling.clip_len != model.config().clip_len {
            return Err(config_err(format!(
                "sampling clip length {} differs from model clip length {}",
                cfg.sampling.clip_len,
                model.config().clip_len
            )));
        }
        let optimizer = AdamW::new(model.params(), cfg.weight_decay);
        let schedule = cfg.schedule();
        let order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0bde_0000_0000);
        Ok(Self {
            model,
            optimizer,
            schedule,
            step: 0,
            order_rng,
            order: (0..dataset_len).collect(),
            cursor: dataset_len,
            cfg,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Dataset indices of the next batch; reshuffles at each epoch boundary.
    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.order_rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Samples the next batch from `dataset` and applies one update.
    pub fn train_step(&mut self, dataset: &[LabeledVideo]) -> Result<StepRecord> {
        let idx = self.next_batch();
        let batch: Vec<&LabeledVideo> = idx.iter().map(|&i| &dataset[i]).collect();
        self.train_on(&batch)
    }

    /// One update on an explicit batch.
    pub fn train_on(&mut self, batch: &[&LabeledVideo]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(config_err("empty batch"));
        }
        let flags = LossFlags::from(&self.cfg);
        let mask = self.model.config().mask_geometry(self.cfg.mask_k);
        let (step, seed) = (self.step, self.cfg.seed);
        let model = &self.model;
        let cfg = &self.cfg;
        let results: Vec<Result<(LossBreakdown, Gradients)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, v)| {
                let mut rng = sample_rng(seed, step, slot);
                let s = prepare_sample(v, &cfg.sampling, cfg.mask_kind, &mask, &mut rng)?;
                sample_gradients(model, &s, flags)
            })
            .collect();
        let inv = 1.0 / batch.len() as f64;
        let mut loss = LossBreakdown::default();
        let mut grads = Gradients::zeros_like(self.model.params());
        for (slot, r) in results.into_iter().enumerate() {
            let (l, g) = r?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step}, batch slot {slot}: l_pred={} l_oracle={} l_l2={}",
                    l.l_pred, l.l_oracle, l.l_l2
                )));
            }
            loss.add_scaled(&l, inv);
            grads.accumulate(&g);
        }
        grads.scale(inv);
        for g in grads.grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
            }
        }
        let lr = self.lr();
        self.optimizer.step(self.model.params_mut(), &grads, lr);
        self.step += 1;
        Ok(StepRecord { step, lr, loss })
    }
}

/// Runs `cfg.steps` updates, writing one CSV log line per step when `log` is given.
pub fn train(
    model: Model,
    cfg: &TrainConfig,
    dataset: &[LabeledVideo],
    mut log: Option<&mut dyn Write>,
) -> Result<(Model, Vec<StepRecord>)> {
    let mut state = TrainState::new(model, cfg.clone(), dataset.len())?;
    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let rec = state.train_step(dataset)?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", rec.csv_row())?;
        }
        history.push(rec);
    }
    Ok((state.model, history))
}
