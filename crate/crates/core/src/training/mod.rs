//! Losses, the optimizer and the training loop.

mod adamw;
mod check;
mod loss;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Document;
use crate::model::{DocFeatures, KvpFormer, ModelError};
use crate::numerics::{Graph, NumericsError};

pub use adamw::AdamW;
pub use check::{
    check_loss_gradients, gradcheck_documents, gradcheck_model, group_errors, loss_check_options, GRADCHECK_INIT_STD,
};
pub use loss::{loss_coarse, loss_fine, loss_question, teacher_forced_candidates, total_loss, DocumentLoss};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training documents")]
    NoData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Documents per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate for the token, position and embedding-norm tables.
    pub lr_backbone: f64,
    /// Learning rate for every other parameter.
    pub lr_new: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 50,
            lr_backbone: 2e-5,
            lr_new: 5e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 1e-2,
            seed: 0,
            init_std: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_backbone >= 0.0 && self.lr_new >= 0.0 && self.lr_backbone.is_finite() && self.lr_new.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)");
        }
        let positive = |v: f64| v > 0.0;
        if !positive(self.eps) || !positive(self.init_std) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("eps and init_std must be positive, weight_decay non-negative");
        }
        Ok(())
    }
}

/// Mean loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub question: f64,
    pub coarse: f64,
    pub fine: f64,
    pub total: f64,
}

/// Loss history as CSV with header `step,l_q,l_coarse,l_fine,l`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,l_q,l_coarse,l_fine,l\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.question, r.coarse, r.fine, r.total);
    }
    out
}

/// Trainer state that survives across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub optimizer: AdamW,
    pub history: Vec<LossRecord>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl TrainState {
    pub fn new(model: &KvpFormer, cfg: &TrainConfig) -> Self {
        TrainState {
            optimizer: AdamW::new(model.params()),
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            epoch: 0,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }
}

/// Precomputed features paired with gold relations.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    features: Vec<DocFeatures>,
    gold: Vec<std::collections::BTreeSet<crate::data::RelationPair>>,
}

impl TrainingSet {
    pub fn new(model: &KvpFormer, docs: &[Document]) -> Result<Self, TrainError> {
        if docs.is_empty() {
            return Err(TrainError::NoData);
        }
        let vocab = model.config().hash_vocab_size;
        Ok(TrainingSet {
            features: docs
                .iter()
                .map(|d| DocFeatures::new(d, vocab))
                .collect::<Result<_, _>>()?,
            gold: docs.iter().map(|d| d.gold_pairs.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Runs one epoch: a seeded shuffle, then one optimizer step per batch with
/// gradients averaged over the batch's documents.
pub fn train_epoch(
    model: &mut KvpFormer,
    data: &TrainingSet,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<(), TrainError> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    for batch in order.chunks(cfg.batch_size) {
        model.params_mut().zero_grad();
        let mut sums = [0.0; 4];
        for &d in batch {
            let mut g = Graph::training(state.rng.gen());
            let loss = DocumentLoss::build(model, &mut g, &data.features[d], &data.gold[d])?;
            g.backward(loss.total, model.params_mut())?;
            for (s, v) in sums.iter_mut().zip(loss.values(&g)) {
                *s += v;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for p in model.params_mut().iter_mut() {
            if let Some(grad) = p.tensor.grad_mut() {
                grad.iter_mut().for_each(|v| *v *= inv);
            }
        }
        state.optimizer.step(model.params_mut(), cfg)?;
        state.history.push(LossRecord {
            step: state.optimizer.steps(),
            epoch: state.epoch,
            question: sums[0] * inv,
            coarse: sums[1] * inv,
            fine: sums[2] * inv,
            total: sums[3] * inv,
        });
    }
    state.epoch += 1;
    Ok(())
}

/// Trains for `cfg.epochs` epochs and returns the per-step loss history.
pub fn train(model: &mut KvpFormer, docs: &[Document], cfg: &TrainConfig) -> Result<Vec<LossRecord>, TrainError> {
    cfg.validate()?;
    let data = TrainingSet::new(model, docs)?;
    let mut state = TrainState::new(model, cfg);
    for _ in 0..cfg.epochs {
        train_epoch(model, &data, cfg, &mut state)?;
    }
    Ok(state.history)
}
