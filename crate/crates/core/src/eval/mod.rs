//! Synthetic object-presence benchmark, metrics and evaluation harness.

pub mod data;
pub mod harness;
pub mod metrics;

pub use data::{generate_dataset, BiasSpec, DataError, Dataset, Label, SceneQAExample, Split, SplitMix, Vocabulary, WorldSpec};
pub use harness::{run_eval, AnswerModel, EvalError, EvalOutcome, PredictionRecord, RecurrentModel, VanillaModel};
pub use metrics::{accuracy_f1, chair_scores, score_decodes, ChairReport, EvalReport, MetricError};
