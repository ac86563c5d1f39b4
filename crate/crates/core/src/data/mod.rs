//! Documents, entities and gold key-value links.

mod funsd;
mod order;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

pub use funsd::{document_from_funsd, document_to_funsd, load_funsd, parse_funsd_str, save_funsd};
pub use order::reading_order;
pub use synth::{synth_forms, SynthConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("document {doc}: {message}")]
    Invalid { doc: String, message: String },
}

/// Semantic entity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Question,
    Answer,
    Header,
    Other,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Question, Label::Answer, Label::Header, Label::Other];

    pub fn index(self) -> usize {
        match self {
            Label::Question => 0,
            Label::Answer => 1,
            Label::Header => 2,
            Label::Other => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Question => "question",
            Label::Answer => "answer",
            Label::Header => "header",
            Label::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    pub text: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: usize,
    pub text: String,
    pub words: Vec<Word>,
    pub bbox: BBox,
    pub label: Label,
    /// Raw `[from, to]` linking entries as they appear in the source file.
    pub links: Vec<[usize; 2]>,
}

/// Directed link from a key entity to a value entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationPair {
    pub key_id: usize,
    pub value_id: usize,
}

impl RelationPair {
    pub fn new(key_id: usize, value_id: usize) -> Self {
        RelationPair { key_id, value_id }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub entities: Vec<Entity>,
    pub gold_pairs: BTreeSet<RelationPair>,
}

impl Document {
    /// Builds a document, collecting gold pairs from entity links and
    /// checking that ids are unique and every link resolves.
    pub fn new(id: impl Into<String>, entities: Vec<Entity>) -> Result<Self, DataError> {
        let id = id.into();
        let mut seen = BTreeSet::new();
        for e in &entities {
            if !seen.insert(e.id) {
                return Err(DataError::Invalid {
                    doc: id,
                    message: format!("duplicate entity id {}", e.id),
                });
            }
        }
        let mut gold_pairs = BTreeSet::new();
        for e in &entities {
            for &[from, to] in &e.links {
                for end in [from, to] {
                    if !seen.contains(&end) {
                        return Err(DataError::Invalid {
                            doc: id,
                            message: format!("entity {} linking references unknown id {end}", e.id),
                        });
                    }
                }
                if from != to {
                    gold_pairs.insert(RelationPair::new(from, to));
                }
            }
        }
        Ok(Document {
            id,
            entities,
            gold_pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.entities.iter().map(|e| e.bbox).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entities.iter().map(|e| e.label).collect()
    }

    /// Entity id to position in `entities`.
    pub fn index_of(&self) -> BTreeMap<usize, usize> {
        self.entities.iter().enumerate().map(|(i, e)| (e.id, i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: usize, label: Label, links: Vec<[usize; 2]>) -> Entity {
        Entity {
            id,
            text: format!("e{id}"),
            words: vec![],
            bbox: BBox::new(0, 0, 10, 10),
            label,
            links,
        }
    }

    #[test]
    fn gold_pairs_from_links() {
        let doc = Document::new(
            "d",
            vec![
                ent(0, Label::Question, vec![[0, 1], [0, 2]]),
                ent(1, Label::Answer, vec![[0, 1]]),
                ent(2, Label::Answer, vec![]),
            ],
        )
        .unwrap();
        let pairs: Vec<_> = doc.gold_pairs.iter().copied().collect();
        assert_eq!(pairs, vec![RelationPair::new(0, 1), RelationPair::new(0, 2)]);
    }

    #[test]
    fn dangling_and_duplicate_ids_rejected() {
        let err = Document::new("d", vec![ent(0, Label::Question, vec![[0, 7]])]).unwrap_err();
        assert!(err.to_string().contains("unknown id 7"));
        let err = Document::new("d", vec![ent(0, Label::Other, vec![]), ent(0, Label::Other, vec![])]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn label_parse_is_case_insensitive() {
        assert_eq!(Label::parse("QUESTION"), Some(Label::Question));
        assert_eq!(Label::parse("Other"), Some(Label::Other));
        assert_eq!(Label::parse("key"), None);
        for l in Label::ALL {
            assert_eq!(Label::from_index(l.index()), Some(l));
        }
    }
}
