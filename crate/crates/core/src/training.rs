//! Backbone pretraining and cell-only fine-tuning.
//!
//! Both loops share one shape: shuffle per epoch, split into batches, compute
//! per-sequence gradients in parallel, sum them in a fixed order, take one
//! optimizer step. Summation order never depends on thread scheduling, so a
//! seed and config pin the result to the byte.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, BackboneError, BackboneVars, BackboneWeights};
use crate::eval::{Dataset, SceneQAExample, Vocabulary};
use crate::numerics::{Gradients, NumericsError, Optimizer, OptimizerKind, Tape, Tensor, Var};
use crate::recurrence::{self, BoundCell, CellMode, CellVariant, RecurrenceError};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("backbone must be frozen before fine-tuning the cell")]
    NotFrozen,
    #[error("`{0}` has no trainable parameters")]
    NotTrainable(&'static str),
    #[error("training diverged (seed {seed}, step {step}): {detail}")]
    Divergence { seed: u64, step: usize, detail: String },
    #[error("backbone integrity violated at step {step}: {detail}")]
    Integrity { step: usize, detail: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Recurrence(#[from] RecurrenceError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("training record csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    AnswerTokensOnly,
    AllTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss_mask: LossMask,
    /// stop after this many optimizer steps even if epochs remain
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 10,
            epochs: 3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            loss_mask: LossMask::AnswerTokensOnly,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// A zero rate or zero epochs is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One training sequence; `answer_start` is the index of the first answer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSequence {
    pub tokens: Vec<usize>,
    pub answer_start: usize,
}

impl TrainSequence {
    pub fn from_example(ex: &SceneQAExample, vocab: &Vocabulary) -> Self {
        let tokens = ex.tokens(vocab);
        let answer_start = tokens.len() - 1;
        Self { tokens, answer_start }
    }

    /// Model input: every token but the last.
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token targets per input position; unsupervised positions are `None`.
    pub fn targets(&self, mask: LossMask) -> Vec<Option<usize>> {
        (1..self.tokens.len())
            .map(|j| match mask {
                LossMask::AllTokens => Some(self.tokens[j]),
                LossMask::AnswerTokensOnly => (j >= self.answer_start).then_some(self.tokens[j]),
            })
            .collect()
    }
}

pub fn sequences(data: &Dataset) -> Vec<TrainSequence> {
    data.examples
        .iter()
        .map(|e| TrainSequence::from_example(e, &data.vocab))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// L2 norm of the batch-mean gradient over the trained parameters
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub steps: Vec<StepRecord>,
    pub backbone_sha_before: String,
    pub backbone_sha_after: String,
}

impl TrainRecord {
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        write_steps_csv(&self.steps, path)
    }
}

/// Per-step loss curve as CSV: `step,epoch,loss,grad_norm`.
pub fn write_steps_csv(steps: &[StepRecord], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "epoch", "loss", "grad_norm"])?;
    for s in steps {
        w.write_record([
            s.step.to_string(),
            s.epoch.to_string(),
            format!("{:.12e}", s.loss),
            format!("{:.12e}", s.grad_norm),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Mean next-token cross-entropy of a depth-recurrent forward over the masked targets.
pub fn recurrent_loss_on(
    tape: &mut Tape,
    bb: &BackboneVars,
    cells: &[BoundCell],
    seq: &TrainSequence,
    mask: LossMask,
) -> Result<Var, RecurrenceError> {
    let fwd = recurrence::depth_forward_on(tape, bb, cells, seq.inputs())?;
    Ok(tape.softmax_cross_entropy(fwd.logits, &seq.targets(mask))?)
}

/// Same loss through plain residual decoding.
pub fn vanilla_loss_on(
    tape: &mut Tape,
    bb: &BackboneVars,
    seq: &TrainSequence,
    mask: LossMask,
) -> Result<Var, BackboneError> {
    let (logits, _) = backbone::vanilla_forward_on(tape, bb, seq.inputs())?;
    Ok(tape.softmax_cross_entropy(logits, &seq.targets(mask))?)
}

fn collect_grads(grads: &Gradients, vars: &[Var], shapes: &[usize]) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(shapes)
        .map(|(&v, &n)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]))
        .collect()
}

type SeqGrad = (f64, Vec<Vec<f64>>);

/// Shared loop. `grad_fn` returns the loss of one sequence and its gradient
/// per tensor of `tensors(params)`; `after_step` runs once per optimizer step.
fn train_loop<P, G, T, A>(
    params: &mut P,
    data: &[TrainSequence],
    cfg: &TrainConfig,
    grad_fn: G,
    tensors: T,
    mut after_step: A,
) -> Result<Vec<StepRecord>, TrainError>
where
    P: Sync,
    G: Fn(&P, &TrainSequence) -> Result<SeqGrad, TrainError> + Sync,
    T: Fn(&mut P) -> Vec<&mut Tensor>,
    A: FnMut(usize) -> Result<(), TrainError>,
{
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = rng::derive(cfg.seed, 0x7EA1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::new();
    let diverged = |step: usize, detail: String| TrainError::Divergence {
        seed: cfg.seed,
        step,
        detail,
    };
    if data.is_empty() {
        return Ok(records);
    }
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = records.len();
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let p: &P = params;
            let per_seq = batch
                .par_iter()
                .map(|&i| grad_fn(p, &data[i]))
                .collect::<Vec<_>>();
            let mut loss = 0.0;
            let mut sum: Option<Vec<Vec<f64>>> = None;
            for r in per_seq {
                let (l, g) = r.map_err(|e| match e {
                    TrainError::Numerics(n) => diverged(step, n.to_string()),
                    TrainError::Recurrence(RecurrenceError::Numerics(n)) => diverged(step, n.to_string()),
                    TrainError::Backbone(BackboneError::Numerics(n)) => diverged(step, n.to_string()),
                    TrainError::Integrity { detail, .. } => TrainError::Integrity { step, detail },
                    other => other,
                })?;
                loss += l;
                match &mut sum {
                    None => sum = Some(g),
                    Some(s) => {
                        for (a, b) in s.iter_mut().zip(&g) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(diverged(step, format!("loss {loss}")));
            }
            let mut grads = sum.unwrap_or_default();
            let mut sq = 0.0;
            for g in grads.iter_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                    sq += *x * *x;
                }
            }
            let mut ts = tensors(params);
            for (t, g) in ts.iter_mut().zip(&grads) {
                t.zero_grad();
                t.accumulate_grad(g)?;
            }
            opt.step(&mut ts).map_err(|e| diverged(step, e.to_string()))?;
            records.push(StepRecord {
                step,
                epoch,
                loss,
                grad_norm: sq.sqrt(),
            });
            after_step(step)?;
        }
    }
    Ok(records)
}

/// Next-token training of every backbone parameter. Returns frozen weights.
pub fn pretrain_backbone(
    init: BackboneWeights,
    corpus: &[TrainSequence],
    cfg: &TrainConfig,
) -> Result<(BackboneWeights, Vec<StepRecord>), TrainError> {
    let mut w = init;
    w.unfreeze();
    let shapes: Vec<usize> = w.tensors().iter().map(|t| t.len()).collect();
    let grad_fn = |w: &BackboneWeights, seq: &TrainSequence| -> Result<SeqGrad, TrainError> {
        let mut tape = Tape::new();
        let bb = w.bind(&mut tape);
        let loss = vanilla_loss_on(&mut tape, &bb, seq, cfg.loss_mask)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item()?, collect_grads(&grads, &bb.params(), &shapes)))
    };
    let steps = train_loop(&mut w, corpus, cfg, grad_fn, |w| w.tensors_mut(), |_| Ok(()))?;
    w.freeze();
    Ok((w, steps))
}

fn check_backbone_buffers(backbone: &BackboneWeights, step: usize) -> Result<(), TrainError> {
    for (name, t) in backbone.named() {
        if t.grad().is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
            return Err(TrainError::Integrity {
                step,
                detail: format!("grad buffer of {name} is nonzero"),
            });
        }
    }
    Ok(())
}

/// Trains only the cell of `mode` on top of a frozen backbone.
///
/// Each step checks that no gradient reached a backbone parameter and that the
/// backbone's own grad buffers stay empty; the record carries the backbone
/// checkpoint hash before and after.
pub fn finetune_cell(
    backbone: &BackboneWeights,
    mode: CellMode,
    data: &[TrainSequence],
    cfg: &TrainConfig,
) -> Result<(CellMode, TrainRecord), TrainError> {
    if !backbone.is_frozen() {
        return Err(TrainError::NotFrozen);
    }
    if mode.variant() == CellVariant::ForcedVanilla {
        return Err(TrainError::NotTrainable(CellVariant::ForcedVanilla.name()));
    }
    if let Some(d) = mode.d_model() {
        if d != backbone.config.d_model {
            return Err(RecurrenceError::Config {
                cell: d,
                backbone: backbone.config.d_model,
            }
            .into());
        }
    }
    let before = backbone.sha256();
    check_backbone_buffers(backbone, 0)?;
    let mut mode = mode;
    for t in mode.tensors_mut() {
        t.set_requires_grad(true);
    }
    let shapes: Vec<usize> = mode.named().iter().map(|(_, t)| t.len()).collect();
    let grad_fn = |mode: &CellMode, seq: &TrainSequence| -> Result<SeqGrad, TrainError> {
        let mut tape = Tape::new();
        let bb = backbone.bind(&mut tape);
        let cell = mode.bind(&mut tape);
        let loss = recurrent_loss_on(&mut tape, &bb, &[cell], seq, cfg.loss_mask)?;
        let grads = tape.backward(loss)?;
        for v in bb.params() {
            if grads.get(v).is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
                return Err(TrainError::Integrity {
                    step: 0,
                    detail: "gradient flowed into a backbone parameter".into(),
                });
            }
        }
        Ok((tape.value(loss).item()?, collect_grads(&grads, &cell.params(), &shapes)))
    };
    let steps = train_loop(
        &mut mode,
        data,
        cfg,
        grad_fn,
        |m| m.tensors_mut(),
        |step| check_backbone_buffers(backbone, step),
    )?;
    for t in mode.tensors_mut() {
        t.set_requires_grad(false);
    }
    let after = backbone.sha256();
    if after != before {
        return Err(TrainError::Integrity {
            step: steps.len(),
            detail: "backbone checkpoint hash changed".into(),
        });
    }
    Ok((
        mode,
        TrainRecord {
            steps,
            backbone_sha_before: before,
            backbone_sha_after: after,
        },
    ))
}
