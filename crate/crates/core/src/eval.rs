//! Relation-level precision, recall and F1, plus label accuracy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Label, RelationPair};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("label sequences differ in length: {predicted} predicted vs {gold} gold")]
    LengthMismatch { predicted: usize, gold: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub n_pred: usize,
    pub n_gold: usize,
    /// Fraction of entities whose predicted label is correct, when known.
    pub label_accuracy: Option<f64>,
}

impl Metrics {
    /// Metrics from raw counts; zero denominators give zero.
    pub fn from_counts(tp: usize, n_pred: usize, n_gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, n_pred);
        let recall = ratio(tp, n_gold);
        // Harmonic mean of P and R, as one division so it rounds once.
        let f1 = if tp > 0 {
            2.0 * tp as f64 / (n_pred + n_gold) as f64
        } else {
            0.0
        };
        Metrics {
            precision,
            recall,
            f1,
            tp,
            n_pred,
            n_gold,
            label_accuracy: None,
        }
    }

    /// JSON with the rates to four decimals.
    pub fn to_json(&self) -> String {
        let acc = match self.label_accuracy {
            Some(a) => format!("{a:.4}"),
            None => "null".into(),
        };
        format!(
            "{{\"precision\": {:.4}, \"recall\": {:.4}, \"f1\": {:.4}, \"tp\": {}, \"n_pred\": {}, \"n_gold\": {}, \"label_accuracy\": {acc}}}",
            self.precision, self.recall, self.f1, self.tp, self.n_pred, self.n_gold
        )
    }
}

/// Directed pair matching for one document.
pub fn relation_prf(predicted: &BTreeSet<RelationPair>, gold: &BTreeSet<RelationPair>) -> Metrics {
    Metrics::from_counts(predicted.intersection(gold).count(), predicted.len(), gold.len())
}

/// Micro-averaged metrics over `(predicted, gold)` documents.
pub fn micro_prf<'a, I>(docs: I) -> Metrics
where
    I: IntoIterator<Item = (&'a BTreeSet<RelationPair>, &'a BTreeSet<RelationPair>)>,
{
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (p, g) in docs {
        let m = relation_prf(p, g);
        tp += m.tp;
        n_pred += m.n_pred;
        n_gold += m.n_gold;
    }
    Metrics::from_counts(tp, n_pred, n_gold)
}

pub fn label_accuracy(predicted: &[Label], gold: &[Label]) -> Result<f64, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}
