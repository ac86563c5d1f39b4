use serde::{Deserialize, Serialize};

use super::ModelError;

/// Which entities are posed to the decoder as questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionRole {
    /// Every entity not labelled `Other`; the answer is its value.
    NonOther,
    /// Value (`Answer`) entities ask for their key. A key may own several
    /// values but a value has at most one key, so this direction turns
    /// linking into single-answer prediction.
    AnswerAsQuestion,
}

/// Architecture and inference switches.
///
/// Defaults are the full-scale settings: 3 encoder and 3 decoder layers,
/// 12 heads, 768-wide content and position embeddings, 2048-wide
/// feed-forward layers and five fine-stage candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub top_k: usize,
    pub hash_vocab_size: usize,
    /// Hidden width of the per-attention spatial bias network.
    pub bias_hidden: usize,
    pub dropout_rate: f64,
    /// Concatenate a gold-label embedding onto each entity's content.
    pub use_gold_labels: bool,
    pub use_spatial_bias: bool,
    pub use_coarse_to_fine: bool,
    pub coarse_accept_threshold: f64,
    pub question_role: QuestionRole,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_encoder_layers: 3,
            num_decoder_layers: 3,
            num_heads: 12,
            d_model: 768,
            d_ffn: 2048,
            top_k: 5,
            hash_vocab_size: 8192,
            bias_hidden: 64,
            dropout_rate: 0.1,
            use_gold_labels: false,
            use_spatial_bias: true,
            use_coarse_to_fine: true,
            coarse_accept_threshold: 0.5,
            question_role: QuestionRole::AnswerAsQuestion,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            num_heads: 2,
            d_model: 16,
            d_ffn: 32,
            top_k: 3,
            hash_vocab_size: 64,
            bias_hidden: 8,
            dropout_rate: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.d_model < 4 || !self.d_model.is_multiple_of(4) {
            return fail(format!("d_model {} must be a positive multiple of 4", self.d_model));
        }
        if self.top_k == 0 {
            return fail("top_k must be at least 1".into());
        }
        if self.hash_vocab_size < 2 {
            return fail("hash_vocab_size must be at least 2".into());
        }
        if self.d_ffn == 0 || self.bias_hidden == 0 {
            return fail("d_ffn and bias_hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !self.coarse_accept_threshold.is_finite() {
            return fail("coarse_accept_threshold must be finite".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Width of the gold-label embedding when enabled.
    pub fn label_dim(&self) -> usize {
        if self.use_gold_labels {
            self.d_model / 4
        } else {
            0
        }
    }

    /// Width of the token embedding table.
    pub fn token_dim(&self) -> usize {
        self.d_model - self.label_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_full_scale() {
        let c = ModelConfig::default();
        assert_eq!(
            (
                c.num_encoder_layers,
                c.num_decoder_layers,
                c.num_heads,
                c.d_model,
                c.d_ffn,
                c.top_k
            ),
            (3, 3, 12, 768, 2048, 5)
        );
        assert!(c.validate().is_ok());
        assert!(ModelConfig::toy().validate().is_ok());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"d_model": 64, "num_heads": 4}"#).unwrap();
        assert_eq!(c.d_model, 64);
        assert_eq!(c.top_k, 5);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"d_modle": 64}"#).is_err());
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig {
            num_heads: 5,
            ..ModelConfig::toy()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            top_k: 0,
            ..ModelConfig::toy()
        };
        assert!(bad.validate().is_err());
    }
}
