//! Yes/no confusion metrics and caption hallucination rates.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::Label;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("length mismatch: {left} predictions vs {right} labels")]
    Length { left: usize, right: usize },
    #[error("empty input")]
    Empty,
}

/// Confusion counts with "yes" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// decodes that were neither yes nor no; already counted as errors in fp/fn
    pub invalid: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize, invalid: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let total = tp + fp + tn + fn_;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            invalid,
            accuracy: ratio(tp + tn, total),
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Sums confusion counts and recomputes the rates.
    pub fn merge(&self, other: &Self) -> Self {
        Self::from_counts(
            self.tp + other.tp,
            self.fp + other.fp,
            self.tn + other.tn,
            self.fn_ + other.fn_,
            self.invalid + other.invalid,
        )
    }
}

fn check_lengths(left: usize, right: usize) -> Result<(), MetricError> {
    if left != right {
        return Err(MetricError::Length { left, right });
    }
    if left == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn accuracy_f1(predictions: &[Label], labels: &[Label]) -> Result<EvalReport, MetricError> {
    let decoded: Vec<Option<Label>> = predictions.iter().copied().map(Some).collect();
    score_decodes(&decoded, labels)
}

/// Like [`accuracy_f1`] but `None` marks an answer outside {yes, no}. Such an
/// answer is wrong: a false negative on a yes label, a false positive on a no label.
pub fn score_decodes(decoded: &[Option<Label>], labels: &[Label]) -> Result<EvalReport, MetricError> {
    check_lengths(decoded.len(), labels.len())?;
    let (mut tp, mut fp, mut tn, mut fn_, mut invalid) = (0, 0, 0, 0, 0);
    for (p, l) in decoded.iter().zip(labels) {
        match (p, l) {
            (Some(Label::Yes), Label::Yes) => tp += 1,
            (Some(Label::Yes), Label::No) => fp += 1,
            (Some(Label::No), Label::No) => tn += 1,
            (Some(Label::No), Label::Yes) => fn_ += 1,
            (None, Label::Yes) => {
                fn_ += 1;
                invalid += 1;
            }
            (None, Label::No) => {
                fp += 1;
                invalid += 1;
            }
        }
    }
    Ok(EvalReport::from_counts(tp, fp, tn, fn_, invalid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub hallucinated_mentions: usize,
    pub total_mentions: usize,
    pub hallucinated_captions: usize,
    pub total_captions: usize,
}

/// Caption-level (`chair_s`) and mention-level (`chair_i`) hallucination rates.
/// Both sides are canonicalized through `synonyms`; unmapped names stand for themselves.
pub fn chair_scores(
    captions: &[Vec<String>],
    ground_truth: &[BTreeSet<String>],
    synonyms: &HashMap<String, String>,
) -> Result<ChairReport, MetricError> {
    if captions.len() != ground_truth.len() {
        return Err(MetricError::Length {
            left: captions.len(),
            right: ground_truth.len(),
        });
    }
    let canon = |s: &String| synonyms.get(s).unwrap_or(s).clone();
    let (mut bad_mentions, mut mentions, mut bad_captions) = (0, 0, 0);
    for (caption, truth) in captions.iter().zip(ground_truth) {
        let truth: BTreeSet<String> = truth.iter().map(canon).collect();
        let bad = caption.iter().filter(|m| !truth.contains(&canon(m))).count();
        mentions += caption.len();
        bad_mentions += bad;
        if bad > 0 {
            bad_captions += 1;
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(ChairReport {
        chair_s: ratio(bad_captions, captions.len()),
        chair_i: ratio(bad_mentions, mentions),
        hallucinated_mentions: bad_mentions,
        total_mentions: mentions,
        hallucinated_captions: bad_captions,
        total_captions: captions.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::*;

    #[test]
    fn perfect_predictions() {
        let l = [Yes, No, Yes];
        let r = accuracy_f1(&l, &l).unwrap();
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));
    }

    #[test]
    fn one_of_each() {
        let r = accuracy_f1(&[Yes, Yes, No, No], &[Yes, No, Yes, No]).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (1, 1, 1, 1));
        assert_eq!([r.accuracy, r.precision, r.recall, r.f1], [0.5; 4]);
    }

    #[test]
    fn all_no_on_balanced() {
        let r = accuracy_f1(&[No; 4], &[Yes, Yes, No, No]).unwrap();
        assert_eq!((r.accuracy, r.f1), (0.5, 0.0));
    }

    #[test]
    fn bad_lengths() {
        assert_eq!(accuracy_f1(&[Yes], &[]), Err(MetricError::Length { left: 1, right: 0 }));
        assert_eq!(accuracy_f1(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn invalid_decodes_are_errors() {
        let r = score_decodes(&[None, None, Some(Yes)], &[Yes, No, Yes]).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.invalid), (1, 1, 1, 2));
    }

    #[test]
    fn chair_hand_case() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let caps = vec![s(&["dog", "cat"]), s(&["car", "tree"])];
        let truth = vec![
            ["dog"].iter().map(|x| x.to_string()).collect(),
            ["car", "tree"].iter().map(|x| x.to_string()).collect(),
        ];
        let r = chair_scores(&caps, &truth, &HashMap::new()).unwrap();
        assert_eq!((r.chair_s, r.chair_i), (0.5, 0.25));
    }

    #[test]
    fn synonyms_canonicalize() {
        let caps = vec![vec!["puppy".to_string()]];
        let truth = vec![["dog".to_string()].into_iter().collect()];
        let syn = HashMap::from([("puppy".to_string(), "dog".to_string())]);
        assert_eq!(chair_scores(&caps, &truth, &syn).unwrap().chair_i, 0.0);
        assert_eq!(chair_scores(&caps, &truth, &HashMap::new()).unwrap().chair_i, 1.0);
    }
}
