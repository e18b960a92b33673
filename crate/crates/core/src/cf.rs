//! Adversarial feature-consistency regularizer.
//!
//! The training set is split once into sides A and B. A discriminator head
//! learns to score A features at or above `+1` and B features at or below
//! `-1` (hinge loss); the backbone is penalized through the scores of its B
//! features so the two sides become indistinguishable.

use std::collections::VecDeque;

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::data::Side;
use crate::error::{Error, Result};
use crate::model::{Group, Model};
use crate::optim::AdamW;
use crate::seed::Rng64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CFConfig {
    /// Fraction of the training set assigned to side A.
    pub p: f64,
    /// Multiplier on the generator penalty.
    pub weight: f64,
    /// Stored feature batches per side.
    pub history_len: usize,
    /// Hidden width of the discriminator head.
    pub desc_channel: usize,
    /// First optimizer step at which the penalty reaches the backbone.
    pub warm_up: u64,
    /// Step from which neither side trains any more.
    pub shut_off: Option<u64>,
    /// Use `+mean(scores_b)` instead of the adversarial `-mean(scores_b)`.
    pub literal_eq6_sign: bool,
}

impl Default for CFConfig {
    fn default() -> Self {
        CFConfig {
            p: 0.5,
            weight: 0.1,
            history_len: 100,
            desc_channel: 64,
            warm_up: 1600,
            shut_off: None,
            literal_eq6_sign: false,
        }
    }
}

impl CFConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("cf.p={} must lie in (0,1)", self.p));
        }
        if !self.weight.is_finite() || self.weight < 0.0 {
            return bad(format!("cf.weight={} must be finite and >= 0", self.weight));
        }
        if self.desc_channel == 0 {
            return bad("cf.desc_channel must be >= 1".into());
        }
        if let Some(s) = self.shut_off {
            if s <= self.warm_up {
                return bad(format!("cf.shut_off={s} must exceed cf.warm_up={}", self.warm_up));
            }
        }
        Ok(())
    }
}

/// `mean(relu(1 − scores_a)) + mean(relu(1 + scores_b))`.
pub fn hinge_disc_loss(tape: &mut Tape, scores_a: NodeId, scores_b: NodeId) -> Result<NodeId> {
    for s in [scores_a, scores_b] {
        if tape.value(s).numel() == 0 || tape.value(s).row_len() != 1 {
            return Err(Error::Contract(format!(
                "hinge loss needs non-empty [n×1] scores, got {:?}",
                tape.value(s).shape()
            )));
        }
    }
    let neg_a = tape.neg(scores_a);
    let margin_a = tape.add_scalar(neg_a, 1.0);
    let hinge_a = tape.relu(margin_a);
    let term_a = tape.mean(hinge_a);
    let margin_b = tape.add_scalar(scores_b, 1.0);
    let hinge_b = tape.relu(margin_b);
    let term_b = tape.mean(hinge_b);
    tape.add(term_a, term_b)
}

/// Unweighted generator penalty on side-B scores: `-mean(scores_b)` by
/// default, `+mean(scores_b)` under `literal_eq6_sign`.
pub fn generator_reg_term(tape: &mut Tape, scores_b: NodeId, cfg: &CFConfig) -> Result<NodeId> {
    if tape.value(scores_b).numel() == 0 {
        return Err(Error::Contract("generator term needs at least one B score".into()));
    }
    let m = tape.mean(scores_b);
    Ok(if cfg.literal_eq6_sign { m } else { tape.neg(m) })
}

/// Bounded FIFO of detached feature batches for each side.
#[derive(Debug, Clone, Default)]
pub struct FeatureHistoryBuffer {
    capacity: usize,
    side_a: VecDeque<Tensor>,
    side_b: VecDeque<Tensor>,
}

impl FeatureHistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        FeatureHistoryBuffer {
            capacity,
            side_a: VecDeque::with_capacity(capacity),
            side_b: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn side(&self, side: Side) -> &VecDeque<Tensor> {
        match side {
            Side::A => &self.side_a,
            Side::B => &self.side_b,
        }
    }

    pub fn len(&self, side: Side) -> usize {
        self.side(side).len()
    }

    pub fn is_empty(&self, side: Side) -> bool {
        self.side(side).is_empty()
    }

    /// Stored batches of one side, oldest first.
    pub fn iter(&self, side: Side) -> impl Iterator<Item = &Tensor> {
        self.side(side).iter()
    }

    pub fn push(&mut self, side: Side, features: Tensor) -> Result<()> {
        if features.is_tracked() {
            return Err(Error::Contract(
                "history only stores detached features".into(),
            ));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let q = match side {
            Side::A => &mut self.side_a,
            Side::B => &mut self.side_b,
        };
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(features);
        Ok(())
    }

    /// One stored batch chosen uniformly, or `None` when the side is empty.
    pub fn sample(&self, side: Side, rng: &mut Rng64) -> Option<&Tensor> {
        let q = self.side(side);
        if q.is_empty() {
            None
        } else {
            q.get(rng.random_range(0..q.len()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Activity {
    pub disc_trains: bool,
    pub gen_penalized: bool,
}

pub fn cf_active(step: u64, cfg: &CFConfig) -> Activity {
    let before_shut_off = cfg.shut_off.is_none_or(|s| step < s);
    Activity {
        disc_trains: before_shut_off,
        gen_penalized: before_shut_off && step >= cfg.warm_up,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Trained { disc_loss: f64 },
    /// Neither the batch nor the history had features for this side.
    Skipped { missing: Side },
}

impl StepOutcome {
    pub fn disc_loss(&self) -> Option<f64> {
        match *self {
            StepOutcome::Trained { disc_loss } => Some(disc_loss),
            StepOutcome::Skipped { .. } => None,
        }
    }
}

/// One discriminator update.
///
/// Scores the current detached features of each side, each concatenated
/// with one batch sampled from that side's history, and steps `opt_d` on the
/// hinge loss. The current features are pushed into the history afterwards.
/// Only group `D` is modified.
pub fn cf_step(
    model: &mut Model,
    current_a: Option<Tensor>,
    current_b: Option<Tensor>,
    buf: &mut FeatureHistoryBuffer,
    opt_d: &mut AdamW,
    history_rng: &mut Rng64,
) -> Result<StepOutcome> {
    if opt_d.group() != Group::D {
        return Err(Error::Contract("cf_step needs the discriminator optimizer".into()));
    }
    for t in current_a.iter().chain(&current_b) {
        if t.is_tracked() {
            return Err(Error::Contract("cf_step takes detached features".into()));
        }
    }

    let mut tape = Tape::new();
    let mut binds = model.bindings();
    let mut side_scores = Vec::with_capacity(2);
    for (side, current) in [(Side::A, &current_a), (Side::B, &current_b)] {
        let past = buf.sample(side, history_rng);
        let feats = match (current, past) {
            (Some(c), Some(p)) => Tensor::concat_rows(&[c, p])?,
            (Some(c), None) => c.clone(),
            (None, Some(p)) => p.clone(),
            (None, None) => return Ok(StepOutcome::Skipped { missing: side }),
        };
        let f = tape.constant(feats);
        side_scores.push(model.discriminate(&mut tape, &mut binds, f)?);
    }
    let loss = hinge_disc_loss(&mut tape, side_scores[0], side_scores[1])?;
    let disc_loss = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    model.zero_grads(Group::D);
    model.accumulate_grads(Group::D, &binds, &grads)?;
    model.apply_grads(Group::D, opt_d)?;

    if let Some(a) = current_a {
        buf.push(Side::A, a)?;
    }
    if let Some(b) = current_b {
        buf.push(Side::B, b)?;
    }
    Ok(StepOutcome::Trained { disc_loss })
}
