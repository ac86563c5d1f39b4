use rand::Rng;

use super::layers::{Ffn, Init, Linear};
use super::ModelConfig;
use crate::geometry::SPATIAL_FEATURE_DIM;
use crate::numerics::{Graph, NumericsError, ParamStore, Var};

/// Multi-head attention whose logits add content and 2-d position dot
/// products to a learned bias computed from the pair's spatial
/// compatibility feature:
///
/// `a_ij = (c_qi . c_kj + p_qi . p_kj) / sqrt(d_head) + FFN_head(r_ij)`
///
/// Queries and keys are projected separately for content and position so
/// the two dot products stay separate; values come from content only.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    query_content: Linear,
    key_content: Linear,
    query_position: Linear,
    key_position: Linear,
    value: Linear,
    output: Linear,
    bias: Option<Ffn>,
    heads: usize,
    d_head: usize,
}

/// Inputs to one attention call. `pair_features` is the row-major
/// `[Nq * Nk, 18]` constant, or `None` to drop the spatial bias.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs {
    pub query_content: Var,
    pub query_position: Var,
    pub key_content: Var,
    pub key_position: Var,
    pub pair_features: Option<Var>,
}

struct Projected {
    qc: Var,
    kc: Var,
    qp: Var,
    kp: Var,
    bias: Option<Var>,
    nq: usize,
    nk: usize,
}

impl SpatialAttention {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, config: &ModelConfig) -> Result<Self, NumericsError> {
        let d = config.d_model;
        Ok(SpatialAttention {
            query_content: init.linear(&format!("{name}.query_content"), d, d)?,
            key_content: init.linear_unbiased(&format!("{name}.key_content"), d, d)?,
            query_position: init.linear(&format!("{name}.query_position"), d, d)?,
            key_position: init.linear_unbiased(&format!("{name}.key_position"), d, d)?,
            value: init.linear(&format!("{name}.value"), d, d)?,
            output: init.linear(&format!("{name}.output"), d, d)?,
            bias: if config.use_spatial_bias {
                Some(init.ffn_unbiased(
                    &format!("{name}.bias"),
                    SPATIAL_FEATURE_DIM,
                    config.bias_hidden,
                    config.num_heads,
                )?)
            } else {
                None
            },
            heads: config.num_heads,
            d_head: config.d_head(),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn project(&self, g: &mut Graph, s: &ParamStore, x: &AttentionInputs) -> Result<Projected, NumericsError> {
        let nq = g.shape(x.query_content)[0];
        let nk = g.shape(x.key_content)[0];
        let bias = match (&self.bias, x.pair_features) {
            (Some(ffn), Some(r)) => Some(ffn.forward(g, s, r)?),
            _ => None,
        };
        Ok(Projected {
            qc: self.query_content.forward(g, s, x.query_content)?,
            kc: self.key_content.forward(g, s, x.key_content)?,
            qp: self.query_position.forward(g, s, x.query_position)?,
            kp: self.key_position.forward(g, s, x.key_position)?,
            bias,
            nq,
            nk,
        })
    }

    fn head_scores(&self, g: &mut Graph, p: &Projected, head: usize) -> Result<Var, NumericsError> {
        let (start, len) = (head * self.d_head, self.d_head);
        let qc = g.narrow(p.qc, 1, start, len)?;
        let kc = g.narrow(p.kc, 1, start, len)?;
        let qp = g.narrow(p.qp, 1, start, len)?;
        let kp = g.narrow(p.kp, 1, start, len)?;
        let kct = g.transpose(kc)?;
        let kpt = g.transpose(kp)?;
        let content = g.matmul(qc, kct)?;
        let position = g.matmul(qp, kpt)?;
        let dots = g.add(content, position)?;
        let scaled = g.scale(dots, 1.0 / (self.d_head as f64).sqrt());
        match p.bias {
            Some(bias) => {
                let column = g.narrow(bias, 1, head, 1)?;
                let column = g.reshape(column, &[p.nq, p.nk])?;
                g.add(scaled, column)
            }
            None => Ok(scaled),
        }
    }

    /// Pre-softmax logits `[Nq, Nk]` of one head.
    pub fn scores(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: &AttentionInputs,
        head: usize,
    ) -> Result<Var, NumericsError> {
        if head >= self.heads {
            return Err(NumericsError::IndexOutOfRange {
                op: "attention_scores",
                index: head,
                len: self.heads,
            });
        }
        let p = self.project(g, s, x)?;
        self.head_scores(g, &p, head)
    }

    /// Attention output `[Nq, d_model]` and the per-head weight matrices.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: &AttentionInputs,
    ) -> Result<(Var, Vec<Var>), NumericsError> {
        let p = self.project(g, s, x)?;
        let v = self.value.forward(g, s, x.key_content)?;
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let logits = self.head_scores(g, &p, head)?;
            let w = g.softmax(logits, 1)?;
            let vh = g.narrow(v, 1, head * self.d_head, self.d_head)?;
            outputs.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let z = g.concat(&outputs, 1)?;
        Ok((self.output.forward(g, s, z)?, weights))
    }
}
