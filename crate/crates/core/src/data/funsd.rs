use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Document, Entity, Label, Word};
use crate::geometry::{normalize_box, union_box, BBox, GRID_MAX};

#[derive(Debug, Serialize, Deserialize)]
struct FunsdFile {
    form: Vec<FunsdEntity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    img: Option<FunsdImage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FunsdImage {
    width: f64,
    height: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FunsdEntity {
    id: usize,
    #[serde(default)]
    text: String,
    #[serde(rename = "box")]
    bbox: Vec<f64>,
    label: String,
    #[serde(default)]
    words: Vec<FunsdWord>,
    #[serde(default)]
    linking: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FunsdWord {
    text: String,
    #[serde(rename = "box")]
    bbox: Vec<f64>,
}

/// Loads every `*.json` annotation file under `path` (or the single file
/// `path` points at), sorted by file name.
pub fn load_funsd(path: &Path) -> Result<Vec<Document>, DataError> {
    let files = annotation_files(path)?;
    files.iter().map(|f| load_file(f)).collect()
}

fn annotation_files(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in fs::read_dir(path).map_err(io_err)? {
        let p = entry.map_err(io_err)?.path();
        if p.extension().is_some_and(|e| e == "json") && p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn load_file(path: &Path) -> Result<Document, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_funsd_str(&id, &text).map_err(|e| match e {
        DataError::Invalid { message, .. } => DataError::File {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Parses one annotation file's contents into a [`Document`].
///
/// Pixel boxes are mapped onto the grid using the optional `img` page size;
/// without it, the page is taken to be the extent of all boxes.
pub fn parse_funsd_str(doc_id: &str, json: &str) -> Result<Document, DataError> {
    let invalid = |message: String| DataError::Invalid {
        doc: doc_id.to_string(),
        message,
    };
    let file: FunsdFile = serde_json::from_str(json).map_err(|e| invalid(format!("malformed JSON: {e}")))?;
    document_from_funsd_file(doc_id, file)
}

/// Parses an already-decoded JSON value.
pub fn document_from_funsd(doc_id: &str, value: serde_json::Value) -> Result<Document, DataError> {
    let file: FunsdFile = serde_json::from_value(value).map_err(|e| DataError::Invalid {
        doc: doc_id.to_string(),
        message: format!("malformed JSON: {e}"),
    })?;
    document_from_funsd_file(doc_id, file)
}

fn document_from_funsd_file(doc_id: &str, file: FunsdFile) -> Result<Document, DataError> {
    let invalid = |message: String| DataError::Invalid {
        doc: doc_id.to_string(),
        message,
    };
    let (page_w, page_h) = match &file.img {
        Some(img) => (img.width, img.height),
        None => page_extent(&file.form),
    };
    let to_box = |raw: &[f64], what: String| -> Result<BBox, DataError> {
        let raw: [f64; 4] = raw
            .try_into()
            .map_err(|_| invalid(format!("{what}: box must have 4 coordinates, got {}", raw.len())))?;
        normalize_box(raw, page_w, page_h).map_err(|e| invalid(format!("{what}: {e}")))
    };

    let mut entities = Vec::with_capacity(file.form.len());
    for fe in &file.form {
        let label = Label::parse(&fe.label)
            .ok_or_else(|| invalid(format!("entity {}: unknown label \"{}\"", fe.id, fe.label)))?;
        let mut bbox = to_box(&fe.bbox, format!("entity {} field \"box\"", fe.id))?;
        let mut words = Vec::with_capacity(fe.words.len());
        for (wi, w) in fe.words.iter().enumerate() {
            let text = w.text.trim();
            if text.is_empty() {
                continue;
            }
            let wb = to_box(&w.bbox, format!("entity {} word {wi} field \"box\"", fe.id))?;
            bbox = union_box(&bbox, &wb);
            words.push(Word {
                text: text.to_string(),
                bbox: wb,
            });
        }
        let mut links = Vec::with_capacity(fe.linking.len());
        for link in &fe.linking {
            let pair: [usize; 2] = link.as_slice().try_into().map_err(|_| {
                invalid(format!(
                    "entity {} field \"linking\": expected [from, to], got {link:?}",
                    fe.id
                ))
            })?;
            links.push(pair);
        }
        entities.push(Entity {
            id: fe.id,
            text: fe.text.clone(),
            words,
            bbox,
            label,
            links,
        });
    }
    Document::new(doc_id, entities).map_err(|e| match e {
        DataError::Invalid { message, .. } => invalid(format!("field \"linking\": {message}")),
        other => other,
    })
}

fn page_extent(form: &[FunsdEntity]) -> (f64, f64) {
    let mut w: f64 = 1.0;
    let mut h: f64 = 1.0;
    let boxes = form
        .iter()
        .flat_map(|e| std::iter::once(&e.bbox).chain(e.words.iter().map(|w| &w.bbox)));
    for b in boxes {
        if b.len() == 4 {
            for x in [b[0], b[2]].into_iter().filter(|v| v.is_finite()) {
                w = w.max(x);
            }
            for y in [b[1], b[3]].into_iter().filter(|v| v.is_finite()) {
                h = h.max(y);
            }
        }
    }
    (w, h)
}

/// Serializes a document back to the annotation schema on the normalized
/// grid (page size 1000 x 1000).
pub fn document_to_funsd(doc: &Document) -> serde_json::Value {
    let grid = f64::from(GRID_MAX);
    let coords = |b: &BBox| b.coords().iter().map(|&c| f64::from(c)).collect::<Vec<_>>();
    let file = FunsdFile {
        form: doc
            .entities
            .iter()
            .map(|e| FunsdEntity {
                id: e.id,
                text: e.text.clone(),
                bbox: coords(&e.bbox),
                label: e.label.as_str().to_string(),
                words: e
                    .words
                    .iter()
                    .map(|w| FunsdWord {
                        text: w.text.clone(),
                        bbox: coords(&w.bbox),
                    })
                    .collect(),
                linking: e.links.iter().map(|l| l.to_vec()).collect(),
            })
            .collect(),
        img: Some(FunsdImage {
            width: grid,
            height: grid,
        }),
    };
    serde_json::to_value(file).expect("annotation schema serializes")
}

/// Writes one `<doc id>.json` per document into `dir`.
pub fn save_funsd(docs: &[Document], dir: &Path) -> Result<(), DataError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for doc in docs {
        let path = dir.join(format!("{}.json", doc.id));
        let text = serde_json::to_string_pretty(&document_to_funsd(doc)).expect("serializable");
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RelationPair;

    const SAMPLE: &str = r#"{"form": [
        {"id": 0, "text": "NAME:", "box": [10, 10, 60, 30], "label": "question",
         "words": [{"text": "NAME:", "box": [10, 10, 60, 30]}], "linking": [[0, 1]]},
        {"id": 1, "text": "John", "box": [70, 10, 120, 30], "label": "Answer",
         "words": [{"text": "John", "box": [70, 10, 120, 30]}], "linking": [[0, 1]]},
        {"id": 2, "text": "misc", "box": [10, 50, 60, 70], "label": "other",
         "words": [], "linking": []}
    ], "img": {"width": 200, "height": 100}}"#;

    #[test]
    fn parses_links_and_labels() {
        let doc = parse_funsd_str("s", SAMPLE).unwrap();
        assert_eq!(doc.len(), 3);
        assert_eq!(doc.entities[1].label, Label::Answer);
        assert_eq!(
            doc.gold_pairs.iter().copied().collect::<Vec<_>>(),
            vec![RelationPair::new(0, 1)]
        );
        // duplicates are preserved on the entities
        assert_eq!(doc.entities[0].links, vec![[0, 1]]);
        assert_eq!(doc.entities[1].links, vec![[0, 1]]);
        assert_eq!(doc.entities[0].bbox.coords(), [50, 100, 300, 300]);
    }

    #[test]
    fn one_key_many_values() {
        let json = r#"{"form": [
            {"id": 0, "text": "k", "box": [0,0,5,5], "label": "question", "linking": [[0,1],[0,2]]},
            {"id": 1, "text": "a", "box": [6,0,9,5], "label": "answer", "linking": []},
            {"id": 2, "text": "b", "box": [6,6,9,9], "label": "answer", "linking": []}
        ]}"#;
        let doc = parse_funsd_str("m", json).unwrap();
        assert_eq!(doc.gold_pairs.len(), 2);
        assert!(doc.gold_pairs.iter().all(|p| p.key_id == 0));
    }

    #[test]
    fn errors_name_the_field() {
        let bad_label = SAMPLE.replace("\"other\"", "\"misc\"");
        let err = parse_funsd_str("s", &bad_label).unwrap_err().to_string();
        assert!(err.contains("unknown label"), "{err}");
        let dangling = SAMPLE.replace("\"linking\": []}", "\"linking\": [[2, 9]]}");
        let err = parse_funsd_str("s", &dangling).unwrap_err().to_string();
        assert!(err.contains("linking") && err.contains('9'), "{err}");
        let err = parse_funsd_str("s", "{not json").unwrap_err().to_string();
        assert!(err.contains("malformed JSON"), "{err}");
    }

    #[test]
    fn round_trip_through_schema() {
        let doc = parse_funsd_str("s", SAMPLE).unwrap();
        let again = document_from_funsd("s", document_to_funsd(&doc)).unwrap();
        assert_eq!(doc, again);
    }

    #[test]
    fn directory_load_reports_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.json"), SAMPLE).unwrap();
        fs::write(dir.path().join("b.json"), "[]").unwrap();
        let err = load_funsd(dir.path()).unwrap_err().to_string();
        assert!(err.contains("b.json"), "{err}");
        fs::remove_file(dir.path().join("b.json")).unwrap();
        let docs = load_funsd(dir.path()).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].id, "a");
    }
}
