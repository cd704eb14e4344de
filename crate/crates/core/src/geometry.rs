//! Normalized boxes, GIoU, and the L1 + GIoU box regression loss.
//!
//! Plain-`f64` versions serve matching costs and evaluation; the `*_var`
//! versions build the same quantities on a [`Tape`] for training.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const L1_WEIGHT: f64 = 5.0;
pub const GIOU_WEIGHT: f64 = 2.0;

/// Floor applied to union and enclosing-box areas.
pub const AREA_EPS: f64 = 1e-9;

/// Center/size box, all coordinates relative to the image extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner box, relative coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXyXy {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCxCyWh {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxCyWh { cx, cy, w, h }
    }

    pub fn to_xyxy(self) -> BoxXyXy {
        BoxXyXy {
            x0: self.cx - self.w / 2.0,
            y0: self.cy - self.h / 2.0,
            x1: self.cx + self.w / 2.0,
            y1: self.cy + self.h / 2.0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxCxCyWh::new(v[0], v[1], v[2], v[3])
    }

    /// Ground-truth validity: center inside the unit square, positive size.
    pub fn is_valid_target(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }
}

impl BoxXyXy {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxXyXy { x0, y0, x1, y1 }
    }

    pub fn to_cxcywh(self) -> BoxCxCyWh {
        BoxCxCyWh {
            cx: (self.x0 + self.x1) / 2.0,
            cy: (self.y0 + self.y1) / 2.0,
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

fn inter_union(a: &BoxXyXy, b: &BoxXyXy) -> (f64, f64) {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

pub fn iou(a: &BoxXyXy, b: &BoxXyXy) -> f64 {
    let (inter, union) = inter_union(a, b);
    inter / union.max(AREA_EPS)
}

/// Generalized IoU in `[-1, 1]`. A zero-area enclosing box yields 0.
pub fn giou(a: &BoxXyXy, b: &BoxXyXy) -> f64 {
    let enclosing = (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0));
    if enclosing <= 0.0 {
        return 0.0;
    }
    let (inter, union) = inter_union(a, b);
    let union = union.max(AREA_EPS);
    let c = enclosing.max(AREA_EPS);
    inter / union - (c - union) / c
}

/// `λ_L1·‖pred − gt‖₁ + λ_giou·(1 − giou)` evaluated off-tape.
pub fn box_loss_value(pred: &BoxCxCyWh, gt: &BoxCxCyWh) -> f64 {
    let l1: f64 = pred.to_array().iter().zip(gt.to_array()).map(|(p, g)| (p - g).abs()).sum();
    L1_WEIGHT * l1 + GIOU_WEIGHT * (1.0 - giou(&pred.to_xyxy(), &gt.to_xyxy()))
}

/// Row-wise GIoU between `pred[G×4]` and `gt[G×4]`, both centre/size; returns `[G×1]`.
pub fn giou_var(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let corners = |tape: &mut Tape, b: Var| -> Result<[Var; 4]> {
        let cx = tape.narrow_last(b, 0, 1)?;
        let cy = tape.narrow_last(b, 1, 1)?;
        let w = tape.narrow_last(b, 2, 1)?;
        let h = tape.narrow_last(b, 3, 1)?;
        let hw = tape.scale(w, 0.5);
        let hh = tape.scale(h, 0.5);
        Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
    };
    let area = |tape: &mut Tape, c: &[Var; 4]| -> Result<Var> {
        let w = tape.sub(c[2], c[0])?;
        let h = tape.sub(c[3], c[1])?;
        let w = tape.clamp_min(w, 0.0);
        let h = tape.clamp_min(h, 0.0);
        tape.mul(w, h)
    };
    let p = corners(tape, pred)?;
    let g = corners(tape, gt)?;
    let area_p = area(tape, &p)?;
    let area_g = area(tape, &g)?;

    let ix0 = tape.maximum(p[0], g[0])?;
    let iy0 = tape.maximum(p[1], g[1])?;
    let ix1 = tape.minimum(p[2], g[2])?;
    let iy1 = tape.minimum(p[3], g[3])?;
    let inter = area(tape, &[ix0, iy0, ix1, iy1])?;
    let union = tape.add(area_p, area_g)?;
    let union = tape.sub(union, inter)?;
    let union = tape.clamp_min(union, AREA_EPS);
    let iou = tape.div(inter, union)?;

    let cx0 = tape.minimum(p[0], g[0])?;
    let cy0 = tape.minimum(p[1], g[1])?;
    let cx1 = tape.maximum(p[2], g[2])?;
    let cy1 = tape.maximum(p[3], g[3])?;
    let enclosing = area(tape, &[cx0, cy0, cx1, cy1])?;
    let enclosing = tape.clamp_min(enclosing, AREA_EPS);
    let slack = tape.sub(enclosing, union)?;
    let penalty = tape.div(slack, enclosing)?;
    tape.sub(iou, penalty)
}

/// Summed box loss over matched rows: `pred[G×4]` against constant targets.
///
/// Returns a one-element tensor; the L1 and GIoU parts are summed over rows.
pub fn box_loss_var(tape: &mut Tape, pred: Var, targets: &[BoxCxCyWh]) -> Result<Var> {
    let flat: Vec<f64> = targets.iter().flat_map(|b| b.to_array()).collect();
    let gt = tape.constant(Tensor::new(vec![targets.len(), 4], flat)?);
    let diff = tape.sub(pred, gt)?;
    let diff = tape.abs(diff);
    let l1 = tape.sum(diff);
    let l1 = tape.scale(l1, L1_WEIGHT);
    let g = giou_var(tape, pred, gt)?;
    let g = tape.sum(g);
    // Σ (1 − giou) = G − Σ giou
    let g = tape.scale(g, -GIOU_WEIGHT);
    let g = tape.add_scalar(g, GIOU_WEIGHT * targets.len() as f64);
    tape.add(l1, g)
}
