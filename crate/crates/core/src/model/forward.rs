use super::attention::AttentionInputs;
use super::{DocFeatures, KvpFormer, ModelError, PairHead};
use crate::geometry::{BBox, SPATIAL_FEATURE_DIM};
use crate::numerics::{Graph, NumericsError, ParamStore, Var};

/// Per-entity model input before any attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRepresentation {
    /// Mean token embedding, followed by the label embedding when gold
    /// labels are enabled.
    pub content: Vec<f64>,
    /// Concatenated x1, y1, x2, y2 bucket embeddings.
    pub position: Vec<f64>,
    pub bbox: BBox,
}

/// Encoder outputs.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Normalized entity embeddings fed to the first layer, `[N, d]`.
    pub input: Var,
    /// Contextual entity representations `H`, `[N, d]`.
    pub content: Var,
    /// 2-d position embeddings, `[N, d]`.
    pub position: Var,
    /// Attention weights per layer, per head, each `[N, N]`.
    pub attention: Vec<Vec<Var>>,
}

/// Decoder outputs for the selected question entities.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// Entity indices of the questions, in row order.
    pub questions: Vec<usize>,
    /// Refined question representations `Q`, `[M, d]`.
    pub content: Var,
    /// Per layer: self-attention heads `[M, M]`, then cross-attention
    /// heads `[M, N]`.
    pub attention: Vec<(Vec<Var>, Vec<Var>)>,
}

impl KvpFormer {
    /// Raw content and position embeddings, `([N, d], [N, d])`.
    pub fn embed(&self, g: &mut Graph, f: &DocFeatures) -> Result<(Var, Var), ModelError> {
        let s = &self.store;
        let n = f.len();
        let flat: Vec<usize> = f.tokens.iter().flatten().copied().collect();
        let mut averaging = vec![0.0; n * flat.len()];
        let mut col = 0;
        for (i, toks) in f.tokens.iter().enumerate() {
            let w = 1.0 / toks.len() as f64;
            for _ in toks {
                averaging[i * flat.len() + col] = w;
                col += 1;
            }
        }
        let rows = g.embedding_lookup(s, self.layout.token, &flat)?;
        let averaging = g.constant(&[n, flat.len()], averaging)?;
        let mut content = g.matmul(averaging, rows)?;
        if let Some(label_table) = self.layout.label {
            let labels: Vec<usize> = f.labels.iter().map(|l| l.index()).collect();
            let l = g.embedding_lookup(s, label_table, &labels)?;
            content = g.concat(&[content, l], 1)?;
        }
        let buckets = f.position_buckets();
        let mut parts = Vec::with_capacity(4);
        for (axis, table) in self.layout.position.iter().enumerate() {
            let idx: Vec<usize> = buckets.iter().map(|b| b[axis]).collect();
            parts.push(g.embedding_lookup(s, *table, &idx)?);
        }
        let position = g.concat(&parts, 1)?;
        Ok((content, position))
    }

    /// Entity representations as plain vectors.
    pub fn embed_entities(&self, f: &DocFeatures) -> Result<Vec<EntityRepresentation>, ModelError> {
        let mut g = Graph::new();
        let (content, position) = self.embed(&mut g, f)?;
        let d = self.config.d_model;
        Ok((0..f.len())
            .map(|i| EntityRepresentation {
                content: g.value(content)[i * d..(i + 1) * d].to_vec(),
                position: g.value(position)[i * d..(i + 1) * d].to_vec(),
                bbox: f.boxes[i],
            })
            .collect())
    }

    fn pair_constant(
        &self,
        g: &mut Graph,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<Option<Var>, NumericsError> {
        if !self.config.use_spatial_bias {
            return Ok(None);
        }
        g.constant(&[rows * cols, SPATIAL_FEATURE_DIM], values).map(Some)
    }

    pub fn encode(&self, g: &mut Graph, f: &DocFeatures) -> Result<Encoded, ModelError> {
        let s = &self.store;
        let n = f.len();
        let (content, position) = self.embed(g, f)?;
        let input = self.layout.embed_norm.forward(g, s, content)?;
        let pairs = self.pair_constant(g, n, n, f.pair_features.clone())?;
        let rate = self.config.dropout_rate;
        let mut h = input;
        let mut attention = Vec::with_capacity(self.layout.encoder.len());
        for layer in &self.layout.encoder {
            let x = AttentionInputs {
                query_content: h,
                query_position: position,
                key_content: h,
                key_position: position,
                pair_features: pairs,
            };
            let (z, w) = layer.attention.forward(g, s, &x)?;
            let z = g.dropout(z, rate)?;
            let sum = g.add(h, z)?;
            h = layer.norm_attention.forward(g, s, sum)?;
            let ff = layer.ffn.forward(g, s, h)?;
            let ff = g.dropout(ff, rate)?;
            let sum = g.add(h, ff)?;
            h = layer.norm_ffn.forward(g, s, sum)?;
            attention.push(w);
        }
        Ok(Encoded {
            input,
            content: h,
            position,
            attention,
        })
    }

    /// Label logits `[N, 4]` in `Label::index` order.
    pub fn question_logits(&self, g: &mut Graph, enc: &Encoded) -> Result<Var, ModelError> {
        Ok(self.layout.question.forward(g, &self.store, enc.content)?)
    }

    /// Runs the decoder over the question entities `questions` (entity
    /// indices, non-empty). Question inputs are their encoder outputs.
    pub fn decode(
        &self,
        g: &mut Graph,
        f: &DocFeatures,
        enc: &Encoded,
        questions: &[usize],
    ) -> Result<Decoded, ModelError> {
        let s = &self.store;
        let n = f.len();
        let m = questions.len();
        let all: Vec<usize> = (0..n).collect();
        let mut q = g.gather_rows(enc.content, questions)?;
        let qp = g.gather_rows(enc.position, questions)?;
        let self_pairs = self.pair_constant(g, m, m, f.block(questions, questions))?;
        let cross_pairs = self.pair_constant(g, m, n, f.block(questions, &all))?;
        let rate = self.config.dropout_rate;
        let mut attention = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let x = AttentionInputs {
                query_content: q,
                query_position: qp,
                key_content: q,
                key_position: qp,
                pair_features: self_pairs,
            };
            let (z, ws) = layer.self_attention.forward(g, s, &x)?;
            let z = g.dropout(z, rate)?;
            let sum = g.add(q, z)?;
            q = layer.norm_self.forward(g, s, sum)?;

            let x = AttentionInputs {
                query_content: q,
                query_position: qp,
                key_content: enc.content,
                key_position: enc.position,
                pair_features: cross_pairs,
            };
            let (z, wc) = layer.cross_attention.forward(g, s, &x)?;
            let z = g.dropout(z, rate)?;
            let sum = g.add(q, z)?;
            q = layer.norm_cross.forward(g, s, sum)?;

            let ff = layer.ffn.forward(g, s, q)?;
            let ff = g.dropout(ff, rate)?;
            let sum = g.add(q, ff)?;
            q = layer.norm_ffn.forward(g, s, sum)?;
            attention.push((ws, wc));
        }
        Ok(Decoded {
            questions: questions.to_vec(),
            content: q,
            attention,
        })
    }

    /// Coarse logits `[M, N]`; scores are their sigmoid.
    pub fn coarse_logits(
        &self,
        g: &mut Graph,
        f: &DocFeatures,
        enc: &Encoded,
        dec: &Decoded,
    ) -> Result<Var, ModelError> {
        let n = f.len();
        let m = dec.questions.len();
        let d = self.config.d_model;
        let all: Vec<usize> = (0..n).collect();
        let r = g.constant(&[m * n, SPATIAL_FEATURE_DIM], f.block(&dec.questions, &all))?;
        let q = g.reshape(dec.content, &[m, 1, d])?;
        let h = g.reshape(enc.content, &[1, n, d])?;
        let qh = g.add(q, h)?;
        let qh = g.reshape(qh, &[m * n, d])?;
        let logits = pair_logits(&self.layout.coarse, g, &self.store, qh, r)?;
        Ok(g.reshape(logits, &[m, n])?)
    }

    /// Fine logits `[M, K]` over each question's candidate entity indices;
    /// every row of `candidates` must have the same length.
    pub fn fine_logits(
        &self,
        g: &mut Graph,
        f: &DocFeatures,
        enc: &Encoded,
        dec: &Decoded,
        candidates: &[Vec<usize>],
    ) -> Result<Var, ModelError> {
        let head = self
            .layout
            .fine
            .as_ref()
            .ok_or_else(|| ModelError::Config("fine head is disabled (use_coarse_to_fine = false)".into()))?;
        let m = dec.questions.len();
        let k = candidates.first().map_or(0, Vec::len);
        if candidates.len() != m || k == 0 || candidates.iter().any(|c| c.len() != k) {
            return Err(ModelError::Config(format!(
                "candidate matrix must be {m} non-empty rows of equal length"
            )));
        }
        let rows: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let flat: Vec<usize> = candidates.iter().flatten().copied().collect();
        let pairs: Vec<(usize, usize)> = rows.iter().zip(&flat).map(|(&i, &j)| (dec.questions[i], j)).collect();
        let r = g.constant(&[m * k, SPATIAL_FEATURE_DIM], f.pairs(&pairs))?;
        let q = g.gather_rows(dec.content, &rows)?;
        let h = g.gather_rows(enc.content, &flat)?;
        let qh = g.add(q, h)?;
        let logits = pair_logits(head, g, &self.store, qh, r)?;
        Ok(g.reshape(logits, &[m, k])?)
    }
}

/// `MLP(x + FFN(r))` for `x = q + h`, one logit per row.
fn pair_logits(head: &PairHead, g: &mut Graph, s: &ParamStore, qh: Var, r: Var) -> Result<Var, NumericsError> {
    let fr = head.feature.forward(g, s, r)?;
    let x = g.add(qh, fr)?;
    head.mlp.forward(g, s, x)
}
