//! The question-answering key-value extractor.
//!
//! Entities are embedded from hashed tokens and 2-d box buckets, refined
//! by a spatial-aware transformer encoder, and classified by label. The
//! selected question entities go through a non-causal decoder that
//! attends to each other and to all entities. Answers come from a sigmoid
//! score over every entity followed by a softmax re-ranking of the top K.

mod attention;
mod config;
mod features;
mod forward;
mod heads;
mod layers;
mod predict;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{GRID_MAX, SPATIAL_FEATURE_DIM};
use crate::numerics::{NumericsError, ParamGroup, ParamId, ParamStore};

pub use attention::{AttentionInputs, SpatialAttention};
pub use config::{ModelConfig, QuestionRole};
pub use features::{hash_token, tokenize, DocFeatures, EMPTY_TOKEN};
pub use forward::{Decoded, Encoded, EntityRepresentation};
pub use heads::{gold_answers, identify_questions, select_answer, topk_candidates};
pub use predict::Prediction;

use layers::{Ffn, Init, Linear, Norm};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("document {0} has no entities")]
    EmptyDocument(String),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
}

/// Number of position buckets per coordinate (grid values 0..=1000).
pub const POSITION_BUCKETS: usize = GRID_MAX as usize + 1;

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    attention: SpatialAttention,
    norm_attention: Norm,
    ffn: Ffn,
    norm_ffn: Norm,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    self_attention: SpatialAttention,
    norm_self: Norm,
    cross_attention: SpatialAttention,
    norm_cross: Norm,
    ffn: Ffn,
    norm_ffn: Norm,
}

/// Scores a (question, entity) pair from `q + h + FFN(r)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PairHead {
    feature: Ffn,
    mlp: Ffn,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    token: ParamId,
    label: Option<ParamId>,
    position: [ParamId; 4],
    embed_norm: Norm,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    question: Linear,
    coarse: PairHead,
    fine: Option<PairHead>,
}

#[derive(Debug, Clone)]
pub struct KvpFormer {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl KvpFormer {
    /// Randomly initialized model; every weight matrix and table is drawn
    /// from `N(0, init_std^2)`, biases start at zero and norm gains at one.
    pub fn new(config: ModelConfig, init_std: f64, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if !(init_std.is_finite() && init_std >= 0.0) {
            return Err(ModelError::Config(format!(
                "init_std {init_std} must be finite and >= 0"
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            std: init_std,
        };
        let d = config.d_model;
        let quarter = d / 4;

        let token = init.normal(
            "embed.token",
            &[config.hash_vocab_size, config.token_dim()],
            ParamGroup::Backbone,
        )?;
        let label = if config.use_gold_labels {
            Some(init.normal("embed.label", &[4, config.label_dim()], ParamGroup::Head)?)
        } else {
            None
        };
        let mut position = Vec::with_capacity(4);
        for axis in ["x1", "y1", "x2", "y2"] {
            position.push(init.normal(
                &format!("embed.position.{axis}"),
                &[POSITION_BUCKETS, quarter],
                ParamGroup::Backbone,
            )?);
        }
        let embed_norm = init.norm("embed.norm", d, ParamGroup::Backbone)?;

        let mut encoder = Vec::with_capacity(config.num_encoder_layers);
        for l in 0..config.num_encoder_layers {
            let name = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                attention: SpatialAttention::new(&mut init, &format!("{name}.attention"), &config)?,
                norm_attention: init.norm(&format!("{name}.norm_attention"), d, ParamGroup::Head)?,
                ffn: init.ffn(&format!("{name}.ffn"), d, config.d_ffn, d)?,
                norm_ffn: init.norm(&format!("{name}.norm_ffn"), d, ParamGroup::Head)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.num_decoder_layers);
        for l in 0..config.num_decoder_layers {
            let name = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                self_attention: SpatialAttention::new(&mut init, &format!("{name}.self_attention"), &config)?,
                norm_self: init.norm(&format!("{name}.norm_self"), d, ParamGroup::Head)?,
                cross_attention: SpatialAttention::new(&mut init, &format!("{name}.cross_attention"), &config)?,
                norm_cross: init.norm(&format!("{name}.norm_cross"), d, ParamGroup::Head)?,
                ffn: init.ffn(&format!("{name}.ffn"), d, config.d_ffn, d)?,
                norm_ffn: init.norm(&format!("{name}.norm_ffn"), d, ParamGroup::Head)?,
            });
        }
        let question = init.linear("question_head", d, 4)?;
        let coarse = PairHead {
            feature: init.ffn("coarse_head.feature", SPATIAL_FEATURE_DIM, d, d)?,
            mlp: init.ffn("coarse_head.mlp", d, d, 1)?,
        };
        let fine = if config.use_coarse_to_fine {
            Some(PairHead {
                feature: init.ffn("fine_head.feature", SPATIAL_FEATURE_DIM, d, d)?,
                mlp: init.ffn_unbiased("fine_head.mlp", d, d, 1)?,
            })
        } else {
            None
        };
        let layout = Layout {
            token,
            label,
            position: position.try_into().expect("four position tables"),
            embed_norm,
            encoder,
            decoder,
            question,
            coarse,
            fine,
        };
        Ok(KvpFormer { config, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Overwrites every parameter from named tensors; names, shapes and
    /// the parameter count must all match this model's layout.
    pub fn load_tensors<I>(&mut self, tensors: I) -> Result<(), ModelError>
    where
        I: IntoIterator<Item = (String, Vec<usize>, Vec<f64>)>,
    {
        let mut seen = vec![false; self.store.len()];
        for (name, shape, values) in tensors {
            let id = self.store.id_of(&name).ok_or_else(|| ModelError::Tensor {
                name: name.clone(),
                message: "not a parameter of this configuration".into(),
            })?;
            let param = self.store.get_mut(id);
            if param.tensor.shape() != shape.as_slice() || values.len() != param.tensor.numel() {
                return Err(ModelError::Tensor {
                    name,
                    message: format!("shape {shape:?} does not match expected {:?}", param.tensor.shape()),
                });
            }
            param.tensor.values_mut().copy_from_slice(&values);
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(ModelError::Tensor {
                name: self
                    .store
                    .iter()
                    .nth(missing)
                    .map(|p| p.name.clone())
                    .unwrap_or_default(),
                message: "missing from checkpoint".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_layout_follows_switches() {
        let m = KvpFormer::new(ModelConfig::toy(), 0.01, 0).unwrap();
        let names: Vec<_> = m.params().iter().map(|p| p.name.clone()).collect();
        assert!(names.contains(&"encoder.0.attention.bias.0.weight".to_string()));
        assert!(names.contains(&"fine_head.mlp.1.weight".to_string()));
        assert!(!names.iter().any(|n| n.starts_with("embed.label")));

        let cfg = ModelConfig {
            use_spatial_bias: false,
            use_coarse_to_fine: false,
            use_gold_labels: true,
            num_decoder_layers: 0,
            ..ModelConfig::toy()
        };
        let m = KvpFormer::new(cfg, 0.01, 0).unwrap();
        let names: Vec<_> = m.params().iter().map(|p| p.name.as_str()).collect();
        assert!(!names.iter().any(|n| n.contains(".bias.0.")));
        assert!(!names
            .iter()
            .any(|n| n.starts_with("fine_head") || n.starts_with("decoder")));
        assert!(names.contains(&"embed.label"));
        let token = m.params().get(m.params().id_of("embed.token").unwrap());
        assert_eq!(token.tensor.shape(), &[64, 12]);
    }

    #[test]
    fn load_tensors_checks_names_and_shapes() {
        let mut m = KvpFormer::new(ModelConfig::toy(), 0.01, 0).unwrap();
        let dump: Vec<_> = m
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.values().to_vec()))
            .collect();
        let mut other = KvpFormer::new(ModelConfig::toy(), 0.01, 1).unwrap();
        other.load_tensors(dump.clone()).unwrap();
        assert_eq!(
            other
                .params()
                .iter()
                .map(|p| p.tensor.values().to_vec())
                .collect::<Vec<_>>(),
            m.params()
                .iter()
                .map(|p| p.tensor.values().to_vec())
                .collect::<Vec<_>>()
        );

        let mut bad = dump.clone();
        bad[0].1 = vec![1, 1];
        let err = m.load_tensors(bad).unwrap_err().to_string();
        assert!(err.contains("embed.token"), "{err}");
        let err = m.load_tensors(dump[1..].to_vec()).unwrap_err().to_string();
        assert!(err.contains("missing") && err.contains("embed.token"), "{err}");
    }
}
