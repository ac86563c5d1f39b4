use crate::data::{reading_order, Document, Label};
use crate::geometry::{pairwise_features, BBox, SPATIAL_FEATURE_DIM};

use super::ModelError;

/// Token-table row reserved for entities without any token.
pub const EMPTY_TOKEN: usize = 0;

/// Lower-cases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// FNV-1a bucket in `1..vocab_size`; row 0 is [`EMPTY_TOKEN`].
pub fn hash_token(token: &str, vocab_size: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    1 + (h % (vocab_size as u64 - 1)) as usize
}

/// Parameter-independent inputs derived from one document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocFeatures {
    pub entity_ids: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub labels: Vec<Label>,
    /// Hashed token rows per entity, in reading order; never empty.
    pub tokens: Vec<Vec<usize>>,
    /// Row-major `N x N x 18` spatial compatibility features.
    pub pair_features: Vec<f64>,
}

impl DocFeatures {
    pub fn new(doc: &Document, hash_vocab_size: usize) -> Result<Self, ModelError> {
        if doc.is_empty() {
            return Err(ModelError::EmptyDocument(doc.id.clone()));
        }
        let index = doc.index_of();
        let mut tokens: Vec<Vec<usize>> = vec![Vec::new(); doc.len()];
        for (entity_id, word) in reading_order(doc) {
            let i = index[&entity_id];
            let text = &doc.entities[i].words[word].text;
            tokens[i].extend(tokenize(text).iter().map(|t| hash_token(t, hash_vocab_size)));
        }
        for (i, e) in doc.entities.iter().enumerate() {
            if e.words.is_empty() {
                tokens[i].extend(tokenize(&e.text).iter().map(|t| hash_token(t, hash_vocab_size)));
            }
            if tokens[i].is_empty() {
                tokens[i].push(EMPTY_TOKEN);
            }
        }
        let boxes = doc.boxes();
        Ok(DocFeatures {
            entity_ids: doc.entities.iter().map(|e| e.id).collect(),
            pair_features: pairwise_features(&boxes, &boxes),
            boxes,
            labels: doc.labels(),
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn pair(&self, i: usize, j: usize) -> &[f64] {
        let off = (i * self.len() + j) * SPATIAL_FEATURE_DIM;
        &self.pair_features[off..off + SPATIAL_FEATURE_DIM]
    }

    /// Features for every `(row, col)` combination, row-major.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * cols.len() * SPATIAL_FEATURE_DIM);
        for &i in rows {
            for &j in cols {
                out.extend_from_slice(self.pair(i, j));
            }
        }
        out
    }

    /// Features for an explicit list of pairs.
    pub fn pairs(&self, pairs: &[(usize, usize)]) -> Vec<f64> {
        let mut out = Vec::with_capacity(pairs.len() * SPATIAL_FEATURE_DIM);
        for &(i, j) in pairs {
            out.extend_from_slice(self.pair(i, j));
        }
        out
    }

    /// Grid buckets `(x1, y1, x2, y2)` per entity.
    pub fn position_buckets(&self) -> Vec<[usize; 4]> {
        self.boxes.iter().map(|b| b.coords().map(|c| c as usize)).collect()
    }
}
