use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::data::{Document, Label, RelationPair};
use crate::geometry::GRID_MAX;

/// Box stroke colour per label: questions blue, answers green, headers
/// yellow, everything else black.
pub fn label_color(label: Label) -> &'static str {
    match label {
        Label::Question => "#1f4fd8",
        Label::Answer => "#1a9641",
        Label::Header => "#e6b800",
        Label::Other => "#000000",
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Draws the entity boxes of `doc` on the 0..1000 grid, coloured by
/// `labels` (gold labels when `None`), and one red arrow per pair from the
/// key's centre to the value's centre. Pairs naming unknown entities are
/// skipped.
pub fn render_svg(doc: &Document, labels: Option<&[Label]>, pairs: &BTreeSet<RelationPair>) -> String {
    let g = GRID_MAX;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{g}" height="{g}" viewBox="0 0 {g} {g}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(&doc.id));
    s.push_str(concat!(
        r#"<defs><marker id="head" markerWidth="8" markerHeight="8" refX="7" refY="4" orient="auto">"#,
        r#"<path d="M0,0 L8,4 L0,8 z" fill="red"/></marker></defs>"#,
        "\n"
    ));
    let _ = writeln!(s, r#"<rect width="{g}" height="{g}" fill="white"/>"#);
    for (i, e) in doc.entities.iter().enumerate() {
        let label = labels.and_then(|l| l.get(i).copied()).unwrap_or(e.label);
        let b = e.bbox;
        let _ = writeln!(
            s,
            r#"<rect class="entity {}" data-id="{}" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            label.as_str(),
            e.id,
            b.x1(),
            b.y1(),
            b.width(),
            b.height(),
            label_color(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" font-family="sans-serif">{}</text>"#,
            b.x1() + 2,
            b.y2() - 2,
            escape(&e.text)
        );
    }
    let index = doc.index_of();
    for p in pairs {
        let (Some(&k), Some(&v)) = (index.get(&p.key_id), index.get(&p.value_id)) else {
            continue;
        };
        let (x1, y1) = doc.entities[k].bbox.center();
        let (x2, y2) = doc.entities[v].bbox.center();
        let _ = writeln!(
            s,
            r#"<line class="arrow" data-key="{}" data-value="{}" x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="red" stroke-width="2" marker-end="url(#head)"/>"#,
            p.key_id, p.value_id
        );
    }
    s.push_str("</svg>\n");
    s
}
