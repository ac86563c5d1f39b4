use std::collections::BTreeSet;

use super::heads::{identify_questions, select_answer, topk_candidates};
use super::{DocFeatures, KvpFormer, ModelError, QuestionRole};
use crate::data::{Document, Label, RelationPair};
use crate::numerics::{sigmoid, Graph};

/// Everything the model decides for one document. Entity references in
/// `question_ids`, `candidates` and `pairs` are entity ids; rows of
/// `coarse_scores` are indexed by entity position.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Label distribution per entity, in `Label::index` order.
    pub entity_labels: Vec<[f64; 4]>,
    pub predicted_labels: Vec<Label>,
    pub question_ids: Vec<usize>,
    /// `M x N` sigmoid scores.
    pub coarse_scores: Vec<Vec<f64>>,
    /// `M x K` candidate entity ids, best coarse score first.
    pub candidates: Vec<Vec<usize>>,
    /// `M x K` softmax over candidates; empty without the fine stage.
    pub fine_scores: Vec<Vec<f64>>,
    pub pairs: BTreeSet<RelationPair>,
}

impl KvpFormer {
    pub fn predict(&self, doc: &Document) -> Result<Prediction, ModelError> {
        let f = DocFeatures::new(doc, self.config.hash_vocab_size)?;
        self.predict_features(&f)
    }

    pub fn predict_features(&self, f: &DocFeatures) -> Result<Prediction, ModelError> {
        let cfg = &self.config;
        let n = f.len();
        let mut g = Graph::new();
        let enc = self.encode(&mut g, f)?;
        let logits = self.question_logits(&mut g, &enc)?;
        let probs = g.softmax(logits, 1)?;
        let entity_labels: Vec<[f64; 4]> = g
            .value(probs)
            .chunks(4)
            .map(|c| c.try_into().expect("four labels"))
            .collect();
        let predicted_labels: Vec<Label> = entity_labels
            .iter()
            .map(|p| Label::from_index(select_answer(p).expect("non-empty")).expect("valid index"))
            .collect();
        let basis = if cfg.use_gold_labels {
            &f.labels
        } else {
            &predicted_labels
        };
        let questions = identify_questions(basis, cfg.question_role);

        let mut out = Prediction {
            entity_labels,
            predicted_labels,
            question_ids: questions.iter().map(|&i| f.entity_ids[i]).collect(),
            coarse_scores: Vec::new(),
            candidates: Vec::new(),
            fine_scores: Vec::new(),
            pairs: BTreeSet::new(),
        };
        if questions.is_empty() {
            return Ok(out);
        }

        let dec = self.decode(&mut g, f, &enc, &questions)?;
        let coarse = self.coarse_logits(&mut g, f, &enc, &dec)?;
        let coarse: Vec<Vec<f64>> = g
            .value(coarse)
            .chunks(n)
            .map(|r| r.iter().map(|&z| sigmoid(z)).collect())
            .collect();
        let candidates: Vec<Vec<usize>> = questions
            .iter()
            .zip(&coarse)
            .map(|(&q, row)| topk_candidates(row, cfg.top_k, Some(q)))
            .collect();

        let has_candidates = candidates.first().is_some_and(|c| !c.is_empty());
        let selected: Vec<Option<usize>> = if !has_candidates {
            vec![None; questions.len()]
        } else if cfg.use_coarse_to_fine {
            let fine = self.fine_logits(&mut g, f, &enc, &dec, &candidates)?;
            let fine = g.softmax(fine, 1)?;
            let k = candidates[0].len();
            out.fine_scores = g.value(fine).chunks(k).map(<[f64]>::to_vec).collect();
            out.fine_scores
                .iter()
                .zip(&candidates)
                .map(|(row, c)| select_answer(row).map(|s| c[s]))
                .collect()
        } else {
            candidates.iter().map(|c| c.first().copied()).collect()
        };

        for (qi, (&q, answer)) in questions.iter().zip(&selected).enumerate() {
            let Some(a) = *answer else { continue };
            if coarse[qi][a] < cfg.coarse_accept_threshold {
                continue;
            }
            let (qid, aid) = (f.entity_ids[q], f.entity_ids[a]);
            out.pairs.insert(match cfg.question_role {
                QuestionRole::AnswerAsQuestion => RelationPair::new(aid, qid),
                QuestionRole::NonOther => RelationPair::new(qid, aid),
            });
        }
        out.candidates = candidates
            .iter()
            .map(|c| c.iter().map(|&j| f.entity_ids[j]).collect())
            .collect();
        out.coarse_scores = coarse;
        Ok(out)
    }
}
