#![allow(dead_code)]

use kvpformer::data::{Document, Entity, Label, Word};
use kvpformer::geometry::BBox;
use rand::Rng;

const WORDS: [&str; 12] = [
    "name", "date", "total", "amount", "address", "phone", "fax", "to", "from", "re", "account", "signed",
];

pub fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let x1 = rng.gen_range(0..900);
    let y1 = rng.gen_range(0..950);
    BBox::new(x1, y1, x1 + rng.gen_range(5..100), y1 + rng.gen_range(5..50))
}

pub fn entity(id: usize, text: &str, bbox: BBox, label: Label, links: Vec<[usize; 2]>) -> Entity {
    Entity {
        id,
        text: text.to_string(),
        words: text
            .split_whitespace()
            .map(|w| Word {
                text: w.to_string(),
                bbox,
            })
            .collect(),
        bbox,
        label,
        links,
    }
}

/// `n` entities with random text, boxes and labels; every answer is linked
/// from the nearest preceding question, if any.
pub fn random_document<R: Rng>(rng: &mut R, id: &str, n: usize) -> Document {
    let mut labels: Vec<Label> = (0..n).map(|_| Label::ALL[rng.gen_range(0..4)]).collect();
    if n >= 2 {
        labels[0] = Label::Question;
        labels[1] = Label::Answer;
    }
    let mut last_question = None;
    let mut links = vec![Vec::new(); n];
    for (i, l) in labels.iter().enumerate() {
        match l {
            Label::Question => last_question = Some(i),
            Label::Answer => {
                if let Some(q) = last_question {
                    links[q].push([q, i]);
                    links[i].push([q, i]);
                }
            }
            _ => {}
        }
    }
    let entities = (0..n)
        .map(|i| {
            let words = rng.gen_range(1..4);
            let text: Vec<&str> = (0..words).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
            entity(
                i,
                &text.join(" "),
                random_box(rng),
                labels[i],
                std::mem::take(&mut links[i]),
            )
        })
        .collect();
    Document::new(id, entities).expect("valid random document")
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
