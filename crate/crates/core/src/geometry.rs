//! Bounding boxes and the pairwise spatial compatibility feature.
//!
//! Boxes live on a page-normalized integer grid in `[0, 1000]`. Every box
//! is clamped to width and height of at least one unit, which keeps the
//! box delta (a ratio and a log-ratio of sizes) finite for every pair.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound of the normalized coordinate grid.
pub const GRID_MAX: i32 = 1000;

/// Number of components in a [`SpatialCompatibility`] feature.
pub const SPATIAL_FEATURE_DIM: usize = 18;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite box coordinate {name} = {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("page size must be positive, got {width} x {height}")]
    InvalidPage { width: f64, height: f64 },
}

/// Axis-aligned box with top-left `(x1, y1)` and bottom-right `(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    x1: i32,
    y1: i32,
    x2: i32,
    y2: i32,
}

impl BBox {
    /// Builds a box from grid coordinates, reordering inverted corners and
    /// clamping into `[0, 1000]` with width and height of at least one.
    pub fn new(x1: i32, y1: i32, x2: i32, y2: i32) -> Self {
        let (x1, x2) = clamp_span(x1.min(x2), x1.max(x2));
        let (y1, y2) = clamp_span(y1.min(y2), y1.max(y2));
        BBox { x1, y1, x2, y2 }
    }

    pub fn x1(&self) -> i32 {
        self.x1
    }

    pub fn y1(&self) -> i32 {
        self.y1
    }

    pub fn x2(&self) -> i32 {
        self.x2
    }

    pub fn y2(&self) -> i32 {
        self.y2
    }

    pub fn coords(&self) -> [i32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        f64::from(self.x2 - self.x1)
    }

    pub fn height(&self) -> f64 {
        f64::from(self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        (f64::from(self.x1 + self.x2) / 2.0, f64::from(self.y1 + self.y2) / 2.0)
    }

    /// Shifts the box, returning `None` if it would leave the grid.
    pub fn translate(&self, dx: i32, dy: i32) -> Option<BBox> {
        let moved = [self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy];
        if moved.iter().all(|c| (0..=GRID_MAX).contains(c)) {
            Some(BBox::new(moved[0], moved[1], moved[2], moved[3]))
        } else {
            None
        }
    }
}

fn clamp_span(lo: i32, hi: i32) -> (i32, i32) {
    let lo = lo.clamp(0, GRID_MAX);
    let hi = hi.clamp(0, GRID_MAX);
    if hi - lo >= 1 {
        (lo, hi)
    } else if lo < GRID_MAX {
        (lo, lo + 1)
    } else {
        (GRID_MAX - 1, GRID_MAX)
    }
}

/// Scales a pixel-space box onto the `[0, 1000]` grid.
pub fn normalize_box(raw: [f64; 4], page_width: f64, page_height: f64) -> Result<BBox, GeometryError> {
    if !(page_width.is_finite() && page_height.is_finite() && page_width > 0.0 && page_height > 0.0) {
        return Err(GeometryError::InvalidPage {
            width: page_width,
            height: page_height,
        });
    }
    const NAMES: [&str; 4] = ["x1", "y1", "x2", "y2"];
    for (name, value) in NAMES.iter().zip(raw) {
        if !value.is_finite() {
            return Err(GeometryError::NonFinite { name, value });
        }
    }
    let scale = |v: f64, extent: f64| -> i32 {
        let v = v.clamp(0.0, extent);
        (v / extent * f64::from(GRID_MAX)).round() as i32
    };
    Ok(BBox::new(
        scale(raw[0], page_width),
        scale(raw[1], page_height),
        scale(raw[2], page_width),
        scale(raw[3], page_height),
    ))
}

/// Smallest box containing both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2))
}

/// Six-component relative geometry of one box with respect to another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta(pub [f64; 6]);

/// Center offsets normalized by each box's own size, plus log size ratios.
///
/// Components are `(dx_ab / w_a, dy_ab / h_a, ln(w_a / w_b), ln(h_a / h_b),
/// dx_ba / w_b, dy_ba / h_b)` where `dx_ab` is the center x offset of `a`
/// from `b`.
pub fn box_delta(a: &BBox, b: &BBox) -> BoxDelta {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let (aw, ah) = (a.width(), a.height());
    let (bw, bh) = (b.width(), b.height());
    BoxDelta([
        (ax - bx) / aw,
        (ay - by) / ah,
        (aw / bw).ln(),
        (ah / bh).ln(),
        (bx - ax) / bw,
        (by - ay) / bh,
    ])
}

/// 18-d pairwise feature: `(delta(a, b), delta(a, u), delta(b, u))` with `u`
/// the union box of `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialCompatibility(pub [f64; SPATIAL_FEATURE_DIM]);

impl SpatialCompatibility {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn spatial_compatibility(a: &BBox, b: &BBox) -> SpatialCompatibility {
    let union = union_box(a, b);
    let mut out = [0.0; SPATIAL_FEATURE_DIM];
    for (block, delta) in [box_delta(a, b), box_delta(a, &union), box_delta(b, &union)]
        .iter()
        .enumerate()
    {
        out[block * 6..block * 6 + 6].copy_from_slice(&delta.0);
    }
    SpatialCompatibility(out)
}

/// Row-major `rows x cols x 18` features between two box lists.
pub fn pairwise_features(rows: &[BBox], cols: &[BBox]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len() * SPATIAL_FEATURE_DIM);
    for a in rows {
        for b in cols {
            out.extend_from_slice(spatial_compatibility(a, b).as_slice());
        }
    }
    out
}
