//! Coordinate math for grid-cell detection: box decode/encode, IoU and
//! non-max suppression.
//!
//! Every function here is pure. Boxes use a center parameterization
//! `(cx, cy, w, h)` in image pixels; the per-cell raw predictions use the
//! `tanh`-based decode, which lets a cell place a box center anywhere from
//! half a cell to the left of its own extent up to the center of the next
//! cell (the cell-relative center lives in the open interval `(-0.5, 1.5)`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Open/closed label attached to a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EyeState {
    Open,
    Closed,
    Unknown,
}

/// Axis-aligned box with confidence and eye-state label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub state: EyeState,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, score: f64, state: EyeState) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "box size must be positive");
        debug_assert!((0.0..=1.0).contains(&score), "score must be in [0,1]");
        Self { cx, cy, w, h, score, state }
    }

    /// Box from corner coordinates `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, state: EyeState) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, score, state)
    }

    /// Corner coordinates `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Raw per-cell prediction: objectness logit, center offsets, log-scale
/// sizes, the cell it came from and the prior box it is relative to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPrediction {
    pub tp: f64,
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub cell_ix: u32,
    pub cell_iy: u32,
    pub prior_w: f64,
    pub prior_h: f64,
}

/// Detection grid geometry: `stride` pixels per cell, `cols x rows` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub stride: u32,
    pub cols: u32,
    pub rows: u32,
}

impl GridSpec {
    /// Grid covering an image of the given size. The image dimensions must
    /// be divisible by the stride.
    pub fn covering(image_w: u32, image_h: u32, stride: u32) -> Result<Self, GeometryError> {
        if stride == 0 || image_w % stride != 0 || image_h % stride != 0 {
            return Err(GeometryError::GridMismatch { image_w, image_h, stride });
        }
        Ok(Self { stride, cols: image_w / stride, rows: image_h / stride })
    }

    pub fn contains_cell(&self, ix: u32, iy: u32) -> bool {
        ix < self.cols && iy < self.rows
    }

    /// Index of the cell containing the point, or `None` outside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(u32, u32)> {
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let ix = (x / self.stride as f64).floor() as u32;
        let iy = (y / self.stride as f64).floor() as u32;
        if self.contains_cell(ix, iy) {
            Some((ix, iy))
        } else {
            None
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("grid stride {stride} does not tile a {image_w}x{image_h} image")]
    GridMismatch { image_w: u32, image_h: u32, stride: u32 },
    #[error("cell ({ix}, {iy}) outside {cols}x{rows} grid")]
    CellOutsideGrid { ix: u32, iy: u32, cols: u32, rows: u32 },
    #[error("box center requires cell-relative offset {offset} outside (-0.5, 1.5)")]
    OffsetOutOfRange { offset: f64 },
}

/// Decodes one raw cell prediction into an image-space box.
///
/// Center: `(tanh(t) + 0.5 + cell_index) * stride` per axis; size:
/// `prior * exp(t)`. The score is the sigmoid of the objectness logit.
pub fn decode_cell(p: &CellPrediction, g: &GridSpec) -> BBox {
    debug_assert!(g.contains_cell(p.cell_ix, p.cell_iy));
    // f64 tanh saturates to exactly +/-1 for |t| > ~19, which would close
    // the open decode interval; keep a hair of margin.
    const EDGE: f64 = 1.0 - 1e-9;
    let s = g.stride as f64;
    let cx = (p.tx.tanh().clamp(-EDGE, EDGE) + 0.5 + p.cell_ix as f64) * s;
    let cy = (p.ty.tanh().clamp(-EDGE, EDGE) + 0.5 + p.cell_iy as f64) * s;
    let w = p.prior_w * p.tw.exp();
    let h = p.prior_h * p.th.exp();
    BBox::new(cx, cy, w, h, sigmoid(p.tp), EyeState::Unknown)
}

/// Cell that a training target for this box should be assigned to: the one
/// containing the box center.
pub fn center_cell(b: &BBox, g: &GridSpec) -> Result<(u32, u32), GeometryError> {
    g.cell_of(b.cx, b.cy).ok_or(GeometryError::CellOutsideGrid {
        ix: (b.cx / g.stride as f64).floor() as u32,
        iy: (b.cy / g.stride as f64).floor() as u32,
        cols: g.cols,
        rows: g.rows,
    })
}

/// Inverse of [`decode_cell`] for a given target cell: produces the raw
/// values that decode back to `b`. The objectness logit of the result is 0.
///
/// Fails with [`GeometryError::OffsetOutOfRange`] when the requested cell
/// cannot reach the box center (the inverse-`tanh` argument leaves `(-1, 1)`).
pub fn encode_target(
    b: &BBox,
    g: &GridSpec,
    prior: (f64, f64),
    cell: (u32, u32),
) -> Result<CellPrediction, GeometryError> {
    let (cell_ix, cell_iy) = cell;
    if !g.contains_cell(cell_ix, cell_iy) {
        return Err(GeometryError::CellOutsideGrid {
            ix: cell_ix,
            iy: cell_iy,
            cols: g.cols,
            rows: g.rows,
        });
    }
    let s = g.stride as f64;
    let ox = b.cx / s - cell_ix as f64 - 0.5;
    let oy = b.cy / s - cell_iy as f64 - 0.5;
    for &o in &[ox, oy] {
        if o <= -1.0 || o >= 1.0 {
            return Err(GeometryError::OffsetOutOfRange { offset: o });
        }
    }
    Ok(CellPrediction {
        tp: 0.0,
        tx: atanh(ox),
        ty: atanh(oy),
        tw: (b.w / prior.0).ln(),
        th: (b.h / prior.1).ln(),
        cell_ix,
        cell_iy,
        prior_w: prior.0,
        prior_h: prior.1,
    })
}

/// Intersection over union of two boxes. Touching edges count as disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Greedy non-max suppression. Detections are kept in descending score
/// order; a detection is dropped when its IoU with an already-kept one
/// exceeds the threshold. Score ties keep the earlier input element, so
/// decoded grids resolve ties by lower cell index.
pub fn nms(dets: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    debug_assert!(iou_threshold > 0.0 && iou_threshold < 1.0);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.partial_cmp(&dets[i].score).unwrap().then(i.cmp(&j)));
    let mut kept: Vec<BBox> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| iou(k, d) <= iou_threshold) {
            kept.push(*d);
        }
    }
    kept
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn atanh(x: f64) -> f64 {
    0.5 * ((1.0 + x) / (1.0 - x)).ln()
}
