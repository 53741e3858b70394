//! Greedy yes/no evaluation of a model over a dataset.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::{Dataset, Label, SceneQAExample, Split, Vocabulary};
use super::metrics::{score_decodes, EvalReport, MetricError};
use crate::backbone::{self, BackboneError, BackboneWeights};
use crate::recurrence::{self, CellMode, RecurrenceError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset vocabulary ({data}) does not match model vocabulary ({model})")]
    Vocabulary { data: usize, model: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Recurrence(#[from] RecurrenceError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Anything that can produce next-token logits for a prompt.
pub trait AnswerModel: Sync {
    fn name(&self) -> String;
    fn vocab_size(&self) -> usize;
    /// Logits for the token following `prompt`.
    fn next_logits(&self, prompt: &[usize]) -> Result<Vec<f64>, EvalError>;
}

pub struct VanillaModel<'a> {
    pub backbone: &'a BackboneWeights,
}

impl AnswerModel for VanillaModel<'_> {
    fn name(&self) -> String {
        "vanilla".into()
    }

    fn vocab_size(&self) -> usize {
        self.backbone.config.vocab
    }

    fn next_logits(&self, prompt: &[usize]) -> Result<Vec<f64>, EvalError> {
        let (logits, _) = backbone::vanilla_forward(prompt, self.backbone)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

pub struct RecurrentModel<'a> {
    pub backbone: &'a BackboneWeights,
    pub mode: &'a CellMode,
}

impl AnswerModel for RecurrentModel<'_> {
    fn name(&self) -> String {
        self.mode.variant().name().into()
    }

    fn vocab_size(&self) -> usize {
        self.backbone.config.vocab
    }

    fn next_logits(&self, prompt: &[usize]) -> Result<Vec<f64>, EvalError> {
        let logits = recurrence::depth_logits(prompt, self.backbone, self.mode)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub split: Split,
    pub label: Label,
    pub decoded_token: usize,
    /// `None` when the decoded token is neither yes nor no
    pub answer: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub model: String,
    pub splits: BTreeMap<Split, EvalReport>,
    pub overall: EvalReport,
    pub predictions: Vec<PredictionRecord>,
}

impl EvalOutcome {
    pub fn accuracy(&self, split: Split) -> Option<f64> {
        self.splits.get(&split).map(|r| r.accuracy)
    }
}

/// Decodes the answer to one example greedily.
pub fn predict(model: &dyn AnswerModel, ex: &SceneQAExample, vocab: &Vocabulary) -> Result<PredictionRecord, EvalError> {
    let logits = model.next_logits(&ex.prompt_tokens(vocab))?;
    let tok = backbone::argmax(&logits);
    Ok(PredictionRecord {
        id: ex.id,
        split: ex.split,
        label: ex.label,
        decoded_token: tok,
        answer: vocab.token_label(tok),
    })
}

/// Scores `model` against ground-truth labels, per split and overall.
/// Examples are decoded in parallel; results keep dataset order.
pub fn run_eval(model: &dyn AnswerModel, data: &Dataset) -> Result<EvalOutcome, EvalError> {
    if data.vocab.size != model.vocab_size() {
        return Err(EvalError::Vocabulary {
            data: data.vocab.size,
            model: model.vocab_size(),
        });
    }
    let predictions = data
        .examples
        .par_iter()
        .map(|ex| predict(model, ex, &data.vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let score = |preds: &[&PredictionRecord]| {
        let decoded: Vec<Option<Label>> = preds.iter().map(|p| p.answer).collect();
        let labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
        score_decodes(&decoded, &labels)
    };
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let group: Vec<&PredictionRecord> = predictions.iter().filter(|p| p.split == split).collect();
        if !group.is_empty() {
            splits.insert(split, score(&group)?);
        }
    }
    let overall = score(&predictions.iter().collect::<Vec<_>>())?;
    Ok(EvalOutcome {
        model: model.name(),
        splits,
        overall,
        predictions,
    })
}

/// Ids of examples whose decoded tokens differ between two outcomes over the same dataset.
pub fn disagreements(a: &EvalOutcome, b: &EvalOutcome) -> Vec<usize> {
    a.predictions
        .iter()
        .zip(&b.predictions)
        .filter(|(x, y)| x.decoded_token != y.decoded_token)
        .map(|(x, _)| x.id)
        .collect()
}

/// Column order of the per-split report CSV.
pub const REPORT_COLUMNS: [&str; 12] = [
    "model", "split", "n", "tp", "fp", "tn", "fn", "invalid", "accuracy", "precision", "recall", "f1",
];

pub fn report_row(model: &str, split: &str, r: &EvalReport) -> Vec<String> {
    vec![
        model.to_string(),
        split.to_string(),
        r.total().to_string(),
        r.tp.to_string(),
        r.fp.to_string(),
        r.tn.to_string(),
        r.fn_.to_string(),
        r.invalid.to_string(),
        format!("{:.6}", r.accuracy),
        format!("{:.6}", r.precision),
        format!("{:.6}", r.recall),
        format!("{:.6}", r.f1),
    ]
}

/// Writes per-split rows followed by an `all` row.
pub fn write_report_rows<W: std::io::Write>(w: &mut csv::Writer<W>, out: &EvalOutcome) -> Result<(), csv::Error> {
    for (split, r) in &out.splits {
        w.write_record(report_row(&out.model, split.name(), r))?;
    }
    w.write_record(report_row(&out.model, "all", &out.overall))
}
