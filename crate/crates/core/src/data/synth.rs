use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Document, Entity, Label, Word};
use crate::geometry::{BBox, GRID_MAX};

const VALUE_WORDS: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "12", "345", "2024", "07/11", "$19.99",
    "n/a", "yes", "no", "main st", "room 4",
];

const NOISE_WORDS: &[&str] = &[
    "page",
    "confidential",
    "form",
    "rev",
    "internal",
    "draft",
    "copy",
    "signature",
    "notes",
    "office use only",
];

/// Layout of generated forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    /// `Other` entities added per key/value entity.
    pub distractor_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: 2,
            cols: 2,
            distractor_fraction: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn grid(rows: usize, cols: usize) -> Self {
        SynthConfig {
            rows,
            cols,
            ..Default::default()
        }
    }
}

/// Generates `count` forms deterministically from `seed`.
///
/// Each grid cell holds a key `field_k:` (labelled question) and a value
/// (labelled answer) placed to its right or below it, linked key to value.
/// `round(distractor_fraction * 2 * cells)` unlinked `Other` entities are
/// scattered over the lower part of the cells.
pub fn synth_forms(seed: u64, count: usize, config: &SynthConfig) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| synth_one(&mut rng, format!("synth_{seed}_{i:04}"), config))
        .collect()
}

fn synth_one(rng: &mut ChaCha8Rng, id: String, config: &SynthConfig) -> Document {
    let rows = config.rows.max(1);
    let cols = config.cols.max(1);
    let grid = f64::from(GRID_MAX);
    let cell_w = grid / cols as f64;
    let cell_h = grid / rows as f64;
    let char_w = (cell_w / 45.0).clamp(3.0, 10.0);
    let line_h = (cell_h / 12.0).clamp(8.0, 25.0);

    let mut entities = Vec::new();
    let cells = rows * cols;
    for cell in 0..cells {
        let x0 = (cell % cols) as f64 * cell_w;
        let y0 = (cell / cols) as f64 * cell_h;
        let key_text = format!("field_{cell}:");
        let kx = x0 + rng.gen_range(5.0..cell_w * 0.15);
        let ky = y0 + rng.gen_range(5.0..cell_h * 0.2);
        let key_box = text_box(kx, ky, &key_text, char_w, line_h);

        let n_words = rng.gen_range(1..=2);
        let value_text = (0..n_words)
            .map(|_| *VALUE_WORDS.choose(rng).expect("non-empty"))
            .collect::<Vec<_>>()
            .join(" ");
        let (vx, vy) = if rng.gen_bool(0.5) {
            (
                key_box.x2() as f64 + rng.gen_range(8.0..30.0),
                ky + rng.gen_range(-2.0..2.0),
            )
        } else {
            (
                kx + rng.gen_range(-4.0..4.0),
                key_box.y2() as f64 + rng.gen_range(4.0..12.0),
            )
        };
        let value_box = text_box(vx, vy, &value_text, char_w, line_h);

        let key_id = entities.len();
        let value_id = key_id + 1;
        let link = vec![[key_id, value_id]];
        entities.push(entity(key_id, &key_text, key_box, Label::Question, link.clone()));
        entities.push(entity(value_id, &value_text, value_box, Label::Answer, link));
    }

    let n_other = (config.distractor_fraction * 2.0 * cells as f64).round() as usize;
    for k in 0..n_other {
        let cell = k % cells;
        let x0 = (cell % cols) as f64 * cell_w;
        let y0 = (cell / cols) as f64 * cell_h;
        let text = *NOISE_WORDS.choose(rng).expect("non-empty");
        let x = x0 + rng.gen_range(5.0..cell_w * 0.5);
        let y = y0 + cell_h * rng.gen_range(0.55..0.85);
        let b = text_box(x, y, text, char_w, line_h);
        entities.push(entity(entities.len(), text, b, Label::Other, vec![]));
    }
    Document::new(id, entities).expect("generated ids are unique and links resolve")
}

fn text_box(x: f64, y: f64, text: &str, char_w: f64, line_h: f64) -> BBox {
    let w = (text.chars().count() as f64 * char_w).max(char_w);
    BBox::new(
        x.round() as i32,
        y.round() as i32,
        (x + w).round() as i32,
        (y + line_h).round() as i32,
    )
}

fn entity(id: usize, text: &str, bbox: BBox, label: Label, links: Vec<[usize; 2]>) -> Entity {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let total: usize = tokens.iter().map(|t| t.chars().count() + 1).sum::<usize>().max(1);
    let width = f64::from(bbox.x2() - bbox.x1());
    let mut cursor = f64::from(bbox.x1());
    let words = tokens
        .iter()
        .map(|t| {
            let span = width * (t.chars().count() + 1) as f64 / total as f64;
            let x1 = cursor.round() as i32;
            cursor += span;
            let x2 = (cursor.round() as i32).min(bbox.x2());
            Word {
                text: t.to_string(),
                bbox: BBox::new(x1, bbox.y1(), x2, bbox.y2()),
            }
        })
        .collect();
    Entity {
        id,
        text: text.to_string(),
        words,
        bbox,
        label,
        links,
    }
}
