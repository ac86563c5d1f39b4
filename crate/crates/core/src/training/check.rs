use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DocumentLoss, TrainError};
use crate::data::{synth_forms, Document, SynthConfig};
use crate::model::{DocFeatures, KvpFormer, ModelConfig};
use crate::numerics::{finite_diff_check, GradCheckOptions, GradCheckReport, Graph, OpKind, ParamGroup, ParamId};

/// Initialization scale of [`gradcheck_model`]. Much smaller weights make
/// many gradients so small that f64 roundoff in the central difference
/// dominates the relative error.
pub const GRADCHECK_INIT_STD: f64 = 0.1;

/// Checker settings for the full training loss: a 1e-3 step balances
/// truncation against roundoff, and large tables are subsampled.
pub fn loss_check_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        epsilon: 1e-3,
        full_check_limit: 32,
        sampled_coords: 16,
        zero_probes: 4,
        seed,
        avoid_kinks: true,
    }
}

/// A tiny batch for gradient checks: one 1x2 form without distractors
/// (4 entities) and one 1x1 form with a distractor (3 entities).
pub fn gradcheck_documents(seed: u64) -> Vec<Document> {
    let mut docs = synth_forms(
        seed,
        1,
        &SynthConfig {
            rows: 1,
            cols: 2,
            distractor_fraction: 0.0,
        },
    );
    docs.extend(synth_forms(
        seed.wrapping_add(1),
        1,
        &SynthConfig {
            rows: 1,
            cols: 1,
            distractor_fraction: 0.5,
        },
    ));
    docs
}

/// A randomly initialized model for gradient checks. Biases start at zero
/// after a normal initialization, which puts ReLU inputs for coincident
/// boxes exactly on the kink; they are drawn from `N(0, std^2)` here so
/// the loss is differentiable at the checked point.
pub fn gradcheck_model(config: ModelConfig, std: f64, seed: u64) -> Result<KvpFormer, TrainError> {
    let mut model = KvpFormer::new(config, std, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let normal = Normal::new(0.0, std).map_err(|e| TrainError::Config(e.to_string()))?;
    for p in model.params_mut().iter_mut() {
        if p.name.ends_with(".bias") {
            p.tensor
                .values_mut()
                .iter_mut()
                .for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    Ok(model)
}

/// Compares the backward pass of the batch-mean training loss against
/// central differences over every parameter of `model`.
///
/// `fault` scales one op's backward rule, to demonstrate that a broken
/// derivative is caught.
pub fn check_loss_gradients(
    model: &mut KvpFormer,
    docs: &[Document],
    opts: &GradCheckOptions,
    fault: Option<(OpKind, f64)>,
) -> Result<GradCheckReport, TrainError> {
    if docs.is_empty() {
        return Err(TrainError::NoData);
    }
    let vocab = model.config().hash_vocab_size;
    let features = docs
        .iter()
        .map(|d| DocFeatures::new(d, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<ParamId> = model.params().ids().collect();
    let inv = 1.0 / docs.len() as f64;
    let template = model.clone();

    finite_diff_check(model.params_mut(), &ids, opts, |store| {
        let mut current = template.clone();
        *current.params_mut() = store.clone();
        let mut g = Graph::new();
        if let Some((op, scale)) = fault {
            g.inject_backward_fault(op, scale);
        }
        let mut total = None;
        for (f, d) in features.iter().zip(docs) {
            let l = DocumentLoss::build(&current, &mut g, f, &d.gold_pairs)?.total;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let loss = g.scale(total.expect("non-empty batch"), inv);
        Ok::<_, TrainError>((g, loss))
    })
}

/// Largest relative error per parameter group.
pub fn group_errors(model: &KvpFormer, report: &GradCheckReport) -> Vec<(ParamGroup, f64)> {
    [ParamGroup::Backbone, ParamGroup::Head]
        .into_iter()
        .map(|group| {
            let worst = report
                .params
                .iter()
                .filter(|p| model.params().id_of(&p.name).map(|id| model.params().get(id).group) == Some(group))
                .map(|p| p.max_rel_error)
                .fold(0.0, f64::max);
            (group, worst)
        })
        .collect()
}
