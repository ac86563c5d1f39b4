use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use super::QuestionRole;
use crate::data::{Label, RelationPair};

/// Indices of the entities posed as questions, given per-entity labels.
pub fn identify_questions(labels: &[Label], role: QuestionRole) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| match role {
            QuestionRole::NonOther => l != Label::Other,
            QuestionRole::AnswerAsQuestion => l == Label::Answer,
        })
        .map(|(i, _)| i)
        .collect()
}

/// The `min(k, N)` highest-scoring indices, best first, ties to the lower
/// index, never including `exclude`.
pub fn topk_candidates(scores: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| Some(j) != exclude).collect();
    idx.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx.truncate(k);
    idx
}

/// Position of the largest value; the first one wins ties.
pub fn select_answer(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in scores.iter().enumerate() {
        if best.is_none_or(|b| *v > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Gold answer entity indices for each question entity index.
///
/// With `AnswerAsQuestion` a question is a value and its answers are the
/// keys linked to it; otherwise a question is a key and its answers are
/// its values.
pub fn gold_answers(
    entity_ids: &[usize],
    gold: &BTreeSet<RelationPair>,
    role: QuestionRole,
    questions: &[usize],
) -> Vec<Vec<usize>> {
    let index: BTreeMap<usize, usize> = entity_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut by_question: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in gold {
        let (q, a) = match role {
            QuestionRole::AnswerAsQuestion => (p.value_id, p.key_id),
            QuestionRole::NonOther => (p.key_id, p.value_id),
        };
        if let (Some(&qi), Some(&ai)) = (index.get(&q), index.get(&a)) {
            by_question.entry(qi).or_default().push(ai);
        }
    }
    questions
        .iter()
        .map(|q| by_question.get(q).cloned().unwrap_or_default())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn question_roles() {
        let labels = [Label::Question, Label::Other, Label::Answer];
        assert_eq!(identify_questions(&labels, QuestionRole::NonOther), vec![0, 2]);
        assert_eq!(identify_questions(&labels, QuestionRole::AnswerAsQuestion), vec![2]);
        assert!(identify_questions(&[Label::Other; 3], QuestionRole::NonOther).is_empty());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_candidates(&[0.1, 0.2, 0.3], 5, None), vec![2, 1, 0]);
        assert_eq!(
            topk_candidates(&[0.9, 0.1, 0.8, 0.7, 0.2, 0.95], 5, None),
            vec![5, 0, 2, 3, 4]
        );
        assert_eq!(topk_candidates(&[0.5; 7], 3, None), vec![0, 1, 2]);
        assert_eq!(topk_candidates(&[0.9, 0.1, 0.8], 5, Some(0)), vec![2, 1]);
    }

    #[test]
    fn answer_selection_prefers_first_max() {
        assert_eq!(select_answer(&[0.2, 0.5, 0.5]), Some(1));
        assert_eq!(select_answer(&[]), None);
    }

    #[test]
    fn gold_answers_follow_role() {
        let gold: BTreeSet<_> = [RelationPair::new(10, 11), RelationPair::new(10, 12)].into();
        let ids = [10, 11, 12];
        assert_eq!(
            gold_answers(&ids, &gold, QuestionRole::AnswerAsQuestion, &[1, 2]),
            vec![vec![0], vec![0]]
        );
        assert_eq!(
            gold_answers(&ids, &gold, QuestionRole::NonOther, &[0, 1]),
            vec![vec![1, 2], vec![]]
        );
    }
}
