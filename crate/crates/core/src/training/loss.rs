use std::collections::BTreeSet;

use crate::data::{Label, RelationPair};
use crate::model::{gold_answers, identify_questions, topk_candidates, DocFeatures, KvpFormer, ModelError};
use crate::numerics::{sigmoid, Graph, NumericsError, Var};

/// Mean softmax cross-entropy of `[N, 4]` label logits.
pub fn loss_question(g: &mut Graph, logits: Var, gold: &[Label]) -> Result<Var, NumericsError> {
    let n = gold.len();
    let mut onehot = vec![0.0; n * 4];
    for (i, l) in gold.iter().enumerate() {
        onehot[i * 4 + l.index()] = 1.0;
    }
    let logp = g.log_softmax(logits, 1)?;
    let target = g.constant(&[n, 4], onehot)?;
    let picked = g.mul(logp, target)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Mean binary cross-entropy over every cell of the `[M, N]` coarse
/// logits against 0/1 `targets`. `None` when there are no questions.
///
/// Uses `BCE(sigmoid(z), y) = softplus(z) - y z`.
pub fn loss_coarse(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Option<Var>, NumericsError> {
    if targets.is_empty() {
        return Ok(None);
    }
    let shape = g.shape(logits).to_vec();
    let y = g.constant(&shape, targets.to_vec())?;
    let sp = g.softplus(logits);
    let yz = g.mul(y, logits)?;
    let cells = g.sub(sp, yz)?;
    Ok(Some(g.mean(cells)))
}

/// Mean softmax cross-entropy of `[M, K]` fine logits over the rows that
/// have a target slot. `None` when no row does.
pub fn loss_fine(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Result<Option<Var>, NumericsError> {
    let contributing = targets.iter().filter(|t| t.is_some()).count();
    if contributing == 0 {
        return Ok(None);
    }
    let k = g.shape(logits)[1];
    let mut onehot = vec![0.0; targets.len() * k];
    for (i, t) in targets.iter().enumerate() {
        if let Some(slot) = t {
            onehot[i * k + slot] = 1.0;
        }
    }
    let logp = g.log_softmax(logits, 1)?;
    let mask = g.constant(&[targets.len(), k], onehot)?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked);
    Ok(Some(g.scale(total, -1.0 / contributing as f64)))
}

/// Unweighted sum of the question, coarse and fine losses; absent terms
/// count as zero.
pub fn total_loss(g: &mut Graph, question: Var, coarse: Option<Var>, fine: Option<Var>) -> Result<Var, NumericsError> {
    let mut total = question;
    for term in [coarse, fine].into_iter().flatten() {
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Top-K candidates for training. If none of the gold answers made the
/// cut, the best-scored gold answer replaces the last candidate. Returns
/// the candidates and the slot of the best-ranked gold answer.
pub fn teacher_forced_candidates(
    scores: &[f64],
    k: usize,
    question: usize,
    gold: &[usize],
) -> (Vec<usize>, Option<usize>) {
    let mut cands = topk_candidates(scores, k, Some(question));
    let gold: Vec<usize> = gold.iter().copied().filter(|&a| a != question).collect();
    if gold.is_empty() || cands.is_empty() {
        return (cands, None);
    }
    if let Some(slot) = cands.iter().position(|c| gold.contains(c)) {
        return (cands, Some(slot));
    }
    let best = topk_candidates(scores, scores.len(), Some(question))
        .into_iter()
        .find(|j| gold.contains(j))
        .expect("gold answers are valid entity indices");
    let last = cands.len() - 1;
    cands[last] = best;
    (cands, Some(last))
}

/// Loss terms of one document, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct DocumentLoss {
    pub question: Var,
    pub coarse: Option<Var>,
    pub fine: Option<Var>,
    pub total: Var,
}

impl DocumentLoss {
    /// Builds the full training loss with gold questions fed to the
    /// decoder and gold answers forced into the candidate lists.
    pub fn build(
        model: &KvpFormer,
        g: &mut Graph,
        f: &DocFeatures,
        gold_pairs: &BTreeSet<RelationPair>,
    ) -> Result<Self, ModelError> {
        let cfg = model.config();
        let n = f.len();
        let enc = model.encode(g, f)?;
        let label_logits = model.question_logits(g, &enc)?;
        let question = loss_question(g, label_logits, &f.labels)?;

        let questions = identify_questions(&f.labels, cfg.question_role);
        let (mut coarse, mut fine) = (None, None);
        if !questions.is_empty() {
            let answers = gold_answers(&f.entity_ids, gold_pairs, cfg.question_role, &questions);
            let dec = model.decode(g, f, &enc, &questions)?;
            let coarse_logits = model.coarse_logits(g, f, &enc, &dec)?;
            let mut targets = vec![0.0; questions.len() * n];
            for (qi, a) in answers.iter().enumerate() {
                for &j in a {
                    targets[qi * n + j] = 1.0;
                }
            }
            coarse = loss_coarse(g, coarse_logits, &targets)?;

            if cfg.use_coarse_to_fine && n > 1 {
                let scores: Vec<f64> = g.value(coarse_logits).iter().map(|&z| sigmoid(z)).collect();
                let (cands, slots): (Vec<_>, Vec<_>) = questions
                    .iter()
                    .enumerate()
                    .map(|(qi, &q)| {
                        teacher_forced_candidates(&scores[qi * n..(qi + 1) * n], cfg.top_k, q, &answers[qi])
                    })
                    .unzip();
                if slots.iter().any(Option::is_some) {
                    let fine_logits = model.fine_logits(g, f, &enc, &dec, &cands)?;
                    fine = loss_fine(g, fine_logits, &slots)?;
                }
            }
        }
        let total = total_loss(g, question, coarse, fine)?;
        Ok(DocumentLoss {
            question,
            coarse,
            fine,
            total,
        })
    }

    /// `(L_Q, L_coarse, L_fine, L)` with absent terms as zero.
    pub fn values(&self, g: &Graph) -> [f64; 4] {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        [
            g.scalar(self.question),
            get(self.coarse),
            get(self.fine),
            g.scalar(self.total),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_predictions_give_log_of_class_count() {
        let mut g = Graph::new();
        let logits = g.constant(&[3, 4], vec![0.7; 12]).unwrap();
        let l = loss_question(&mut g, logits, &[Label::Question, Label::Other, Label::Header]).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);

        let logits = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let l = loss_coarse(&mut g, logits, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
            .unwrap()
            .unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-12);

        let logits = g.constant(&[2, 5], vec![-1.0; 10]).unwrap();
        let l = loss_fine(&mut g, logits, &[Some(0), Some(3)]).unwrap().unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_predictions_approach_zero() {
        let mut g = Graph::new();
        let logits = g.constant(&[1, 4], vec![40.0, 0.0, 0.0, 0.0]).unwrap();
        let l = loss_question(&mut g, logits, &[Label::Question]).unwrap();
        assert!(g.scalar(l) < 1e-15);
        let logits = g.constant(&[1, 2], vec![40.0, -40.0]).unwrap();
        let l = loss_coarse(&mut g, logits, &[1.0, 0.0]).unwrap().unwrap();
        assert!(g.scalar(l) < 1e-15);
        let logits = g.constant(&[1, 3], vec![40.0, 0.0, 0.0]).unwrap();
        let l = loss_fine(&mut g, logits, &[Some(0)]).unwrap().unwrap();
        assert!(g.scalar(l) < 1e-15);
    }

    #[test]
    fn single_entity_question_loss_is_its_cross_entropy() {
        let mut g = Graph::new();
        let z = [0.3, -1.2, 2.0, 0.1];
        let logits = g.constant(&[1, 4], z.to_vec()).unwrap();
        let l = loss_question(&mut g, logits, &[Label::Header]).unwrap();
        let lse = z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((g.scalar(l) - (lse - z[2])).abs() < 1e-12);
    }

    #[test]
    fn empty_terms_are_skipped() {
        let mut g = Graph::new();
        let logits = g.constant(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(loss_coarse(&mut g, logits, &[]).unwrap().is_none());
        assert!(loss_fine(&mut g, logits, &[None]).unwrap().is_none());
        let q = g.constant(&[1], vec![0.0]).unwrap();
        let t = total_loss(&mut g, q, None, None).unwrap();
        assert_eq!(g.scalar(t), 0.0);
        let a = g.constant(&[1], vec![1.0]).unwrap();
        let b = g.constant(&[1], vec![0.5]).unwrap();
        let c = g.constant(&[1], vec![0.25]).unwrap();
        let t = total_loss(&mut g, a, Some(b), Some(c)).unwrap();
        assert_eq!(g.scalar(t), 1.75);
    }

    #[test]
    fn teacher_forcing_injects_missing_gold() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.1, 0.05];
        let (c, slot) = teacher_forced_candidates(&scores, 3, 0, &[2]);
        assert_eq!((c, slot), (vec![1, 2, 3], Some(1)));
        let (c, slot) = teacher_forced_candidates(&scores, 3, 0, &[5]);
        assert_eq!((c, slot), (vec![1, 2, 5], Some(2)));
        let (c, slot) = teacher_forced_candidates(&scores, 3, 0, &[]);
        assert_eq!((c, slot), (vec![1, 2, 3], None));
    }
}
