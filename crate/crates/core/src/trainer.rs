//! The training loop: task loss plus the scheduled consistency penalty on
//! the backbone, interleaved with discriminator updates, plus evaluation.

use crate::autodiff::Tape;
use crate::cf::{cf_active, cf_step, generator_reg_term, CFConfig, FeatureHistoryBuffer};
use crate::data::{batches, split_ab, BatchPlan, Dataset, Side, SplitAssignment};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{Group, Mode, Model};
use crate::optim::{AdamW, OptimHyper};
use crate::seed::{stream_rng, stream_seed, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Regularizers {
    pub cf: Option<CFConfig>,
    /// Decoupled weight decay applied through the optimizer.
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Inverted-dropout rate; consumed when the model is built.
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimHyper,
    pub regularizers: Regularizers,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            seed: 0,
            optim: OptimHyper::default(),
            regularizers: Regularizers::default(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and eval_every must be >= 1".into(),
            ));
        }
        self.optim.validate()?;
        let r = &self.regularizers;
        if !(0.0..1.0).contains(&r.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0,1)",
                r.label_smoothing
            )));
        }
        if !(0.0..1.0).contains(&r.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", r.dropout)));
        }
        if r.weight_decay.is_nan() || r.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay {} < 0", r.weight_decay)));
        }
        if let Some(cf) = &r.cf {
            cf.validate()?;
        }
        Ok(())
    }

    /// Optimizer hyperparameters with the weight-decay regularizer folded in.
    pub fn hyper(&self) -> OptimHyper {
        OptimHyper {
            weight_decay: self.optim.weight_decay + self.regularizers.weight_decay,
            ..self.optim
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }
}

/// Which update just happened, reported to a [`train_run_observed`] observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, Copy)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: u64,
    pub phase: Phase,
    pub model: &'a Model,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

/// Fraction of rows whose label ranks within the `k` highest logits; ties
/// rank the lower class index first and `k` is clamped to the class count.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> f64 {
    let classes = logits.row_len();
    let k = k.min(classes);
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let rank = (0..classes)
                .filter(|&c| row[c] > row[y] || (row[c] == row[y] && c < y))
                .count();
            rank < k
        })
        .count();
    hits as f64 / labels.len() as f64
}

const EVAL_CHUNK: usize = 512;

/// Eval-mode mean cross-entropy, top-1 and top-5 accuracy.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Evaluation> {
    let n = ds.len();
    let (mut loss, mut top1, mut top5) = (0.0, 0.0, 0.0);
    let order: Vec<usize> = (0..n).collect();
    for idx in order.chunks(EVAL_CHUNK) {
        let x = ds.inputs.select_rows(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let (_, logits) = model.predict(&x)?;
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let ce = tape.softmax_cross_entropy(l, &labels)?;
        let w = idx.len() as f64;
        loss += tape.value(ce).item() * w;
        top1 += topk_accuracy(&logits, &labels, 1) * w;
        top5 += topk_accuracy(&logits, &labels, 5) * w;
    }
    let n = n as f64;
    Ok(Evaluation {
        loss: loss / n,
        top1: top1 / n,
        top5: top5 / n,
    })
}

/// Eval-mode backbone features for every sample.
pub fn extract_features(model: &Model, ds: &Dataset) -> Result<Tensor> {
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut parts = Vec::new();
    for idx in order.chunks(EVAL_CHUNK) {
        let (f, _) = model.predict(&ds.inputs.select_rows(idx)?)?;
        parts.push(f);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

pub fn train_run(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    train_run_observed(model, train, val, cfg, |_| {})
}

/// The A/B split a run with this seed uses.
pub fn run_split(n: usize, cfg: &TrainConfig) -> Result<Option<SplitAssignment>> {
    cfg.regularizers
        .cf
        .map(|cf| split_ab(n, cf.p, stream_seed(cfg.seed, Stream::Split)))
        .transpose()
}

/// [`train_run`] with a callback after every parameter update.
pub fn train_run_observed(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(StepEvent<'_>),
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if train.num_classes != model.classes() || val.num_classes != model.classes() {
        return Err(Error::Config(format!(
            "model has {} classes, datasets have {} / {}",
            model.classes(),
            train.num_classes,
            val.num_classes
        )));
    }
    let cf = cfg.regularizers.cf;
    if let Some(c) = &cf {
        if c.desc_channel != model.arch().desc_head.first().map_or(0, desc_width) {
            return Err(Error::Config(format!(
                "cf.desc_channel={} does not match the model's discriminator head",
                c.desc_channel
            )));
        }
    }
    let split = run_split(train.len(), cfg)?;
    let plan = BatchPlan {
        seed: stream_seed(cfg.seed, Stream::Order),
        batch_size: cfg.batch_size,
    };
    let hyper = cfg.hyper();
    let mut opt_g = AdamW::new(hyper, Group::G);
    let mut opt_d = AdamW::new(hyper, Group::D);
    let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout);
    let mut history_rng = stream_rng(cfg.seed, Stream::History);
    let mut history = FeatureHistoryBuffer::new(cf.map_or(0, |c| c.history_len));
    let smoothing = cfg.regularizers.label_smoothing;

    let mut records = Vec::new();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut hit_sum, mut seen) = (0.0, 0.0, 0usize);
        let (mut disc_sum, mut disc_n) = (0.0, 0usize);
        let (mut pen_sum, mut pen_n) = (0.0, 0usize);

        for batch in batches(train, &plan, epoch, split.as_ref())? {
            let active = cf.map(|c| (c, cf_active(step, &c)));
            let mut tape = Tape::new();
            let mut binds = model.bindings();
            let x = tape.constant(batch.inputs.clone());
            let out = model.forward(&mut tape, &mut binds, x, Mode::Train, &mut dropout_rng)?;
            let task = tape.cross_entropy(out.logits, &batch.labels, smoothing)?;
            let task_value = tape.value(task).item();
            if !task_value.is_finite() {
                return Err(Error::NonFinite {
                    what: "train loss",
                    epoch,
                    step: step as usize,
                });
            }

            let rows_b = batch.rows(Side::B);
            let mut loss = task;
            if let Some((c, act)) = active {
                if act.gen_penalized && c.weight > 0.0 && !rows_b.is_empty() {
                    let fb = tape.select_rows(out.features, &rows_b)?;
                    let scores = model.discriminate(&mut tape, &mut binds, fb)?;
                    let term = generator_reg_term(&mut tape, scores, &c)?;
                    let weighted = tape.scalar_mul(term, c.weight);
                    pen_sum += tape.value(weighted).item();
                    pen_n += 1;
                    loss = tape.add(task, weighted)?;
                }
            }

            let grads = tape.backward(loss)?;
            model.zero_grads(Group::G);
            model.accumulate_grads(Group::G, &binds, &grads)?;
            model.apply_grads(Group::G, &mut opt_g)?;
            observer(StepEvent {
                epoch,
                step,
                phase: Phase::Generator,
                model,
            });

            if let Some((_, act)) = active {
                if act.disc_trains {
                    let feats = tape.value(out.features);
                    let rows_a = batch.rows(Side::A);
                    let take = |rows: &[usize]| -> Result<Option<Tensor>> {
                        if rows.is_empty() {
                            Ok(None)
                        } else {
                            Ok(Some(feats.select_rows(rows)?))
                        }
                    };
                    let outcome = cf_step(
                        model,
                        take(&rows_a)?,
                        take(&rows_b)?,
                        &mut history,
                        &mut opt_d,
                        &mut history_rng,
                    )?;
                    if let Some(d) = outcome.disc_loss() {
                        if !d.is_finite() {
                            return Err(Error::NonFinite {
                                what: "discriminator loss",
                                epoch,
                                step: step as usize,
                            });
                        }
                        disc_sum += d;
                        disc_n += 1;
                        observer(StepEvent {
                            epoch,
                            step,
                            phase: Phase::Discriminator,
                            model,
                        });
                    }
                }
            }

            let w = batch.labels.len();
            loss_sum += task_value * w as f64;
            hit_sum += topk_accuracy(tape.value(out.logits), &batch.labels, 1) * w as f64;
            seen += w;
            step += 1;
        }

        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let ev = evaluate(model, val)?;
            if !ev.loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "validation loss",
                    epoch,
                    step: step as usize,
                });
            }
            let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
            records.push(MetricsRecord {
                epoch,
                train_loss: loss_sum / seen as f64,
                train_top1: hit_sum / seen as f64,
                val_loss: ev.loss,
                val_top1: ev.top1,
                val_top5: ev.top5,
                disc_loss: mean(disc_sum, disc_n),
                cf_penalty: mean(pen_sum, pen_n),
            });
        }
    }
    Ok(records)
}

fn desc_width(first: &crate::model::LayerSpec) -> usize {
    match first.kind {
        crate::model::LayerKind::Dense { outputs, .. } => outputs,
        _ => 0,
    }
}
