use super::Document;

/// Serializes all words top-left to bottom-right.
///
/// Words are grouped into lines by their vertical center divided by the
/// median word height, then ordered by left edge. Ties fall back to
/// `(entity id, word index)` so the order is total and stable.
pub fn reading_order(doc: &Document) -> Vec<(usize, usize)> {
    let mut heights: Vec<i32> = doc
        .entities
        .iter()
        .flat_map(|e| e.words.iter().map(|w| w.bbox.y2() - w.bbox.y1()))
        .collect();
    if heights.is_empty() {
        return Vec::new();
    }
    heights.sort_unstable();
    let line_height = f64::from(heights[heights.len() / 2].max(1));

    // (line, x1, entity id, word index), sorted lexicographically.
    let mut keyed: Vec<(i64, i32, usize, usize)> = doc
        .entities
        .iter()
        .flat_map(|e| {
            e.words.iter().enumerate().map(move |(wi, w)| {
                let line = (w.bbox.center().1 / line_height).floor() as i64;
                (line, w.bbox.x1(), e.id, wi)
            })
        })
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, _, id, wi)| (id, wi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Entity, Label, Word};
    use crate::geometry::BBox;

    fn doc_of(words: &[(i32, i32)]) -> Document {
        let entities = words
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                let b = BBox::new(x, y - 5, x + 20, y + 5);
                Entity {
                    id: i,
                    text: format!("w{i}"),
                    words: vec![Word {
                        text: format!("w{i}"),
                        bbox: b,
                    }],
                    bbox: b,
                    label: Label::Other,
                    links: vec![],
                }
            })
            .collect();
        Document::new("t", entities).unwrap()
    }

    #[test]
    fn singleton() {
        assert_eq!(reading_order(&doc_of(&[(40, 40)])), vec![(0, 0)]);
    }

    #[test]
    fn left_to_right_on_a_line() {
        assert_eq!(reading_order(&doc_of(&[(200, 10), (10, 10)])), vec![(1, 0), (0, 0)]);
    }

    #[test]
    fn rows_then_columns() {
        // heights 10, centers 10/10/60 -> lines 1, 1, 6
        let order = reading_order(&doc_of(&[(300, 10), (20, 10), (50, 60)]));
        assert_eq!(order, vec![(1, 0), (0, 0), (2, 0)]);
    }

    #[test]
    fn brute_force_key_sort_agrees() {
        let pts = [(5, 33), (400, 31), (90, 36), (10, 88), (600, 12), (3, 12), (300, 90)];
        let doc = doc_of(&pts);
        // every word is 10 high
        let mut expect: Vec<usize> = (0..pts.len()).collect();
        expect.sort_by_key(|&i| ((pts[i].1 as f64 / 10.0).floor() as i64, pts[i].0, i));
        let got: Vec<usize> = reading_order(&doc).into_iter().map(|(e, _)| e).collect();
        assert_eq!(got, expect);
    }
}
