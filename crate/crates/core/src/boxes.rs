//! Axis-aligned boxes and the Inner-WIoU localization loss.

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_INNER_RATIO: f64 = 0.75;
pub const DEFAULT_GAMMA_W: f64 = 1.0;

/// Corner-format box in pixels; serialized as `[xmin, ymin, xmax, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.xmin, b.ymin, b.xmax, b.ymax]
    }
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = BBox { xmin, ymin, xmax, ymax };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.xmin, self.ymin, self.xmax, self.ymax];
        if c.iter().any(|v| !v.is_finite()) || self.xmax <= self.xmin || self.ymax <= self.ymin {
            return contract(format!("degenerate box {c:?}"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { xmin: self.xmin + dx, ymin: self.ymin + dy, xmax: self.xmax + dx, ymax: self.ymax + dy }
    }

    /// Same centre, extents multiplied by `ratio`. Computed as a corner mix
    /// so that `ratio == 1` returns the box bit-exactly.
    pub fn shrink(&self, ratio: f64) -> BBox {
        let (a, b) = ((1.0 + ratio) / 2.0, (1.0 - ratio) / 2.0);
        BBox {
            xmin: self.xmin * a + self.xmax * b,
            ymin: self.ymin * a + self.ymax * b,
            xmax: self.xmin * b + self.xmax * a,
            ymax: self.ymin * b + self.ymax * a,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.xmax.min(other.xmax) - self.xmin.max(other.xmin)).max(0.0);
        let h = (self.ymax.min(other.ymax) - self.ymin.max(other.ymin)).max(0.0);
        w * h
    }

    pub fn as_array(&self) -> [f64; 4] {
        (*self).into()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection_area(b);
    Ok(inter / (a.area() + b.area() - inter))
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return contract(format!("inner ratio must be in (0, 1], got {ratio}"));
    }
    Ok(())
}

/// IoU of both boxes shrunk about their centres by `ratio`.
pub fn inner_iou(a: &BBox, b: &BBox, ratio: f64) -> Result<f64> {
    check_ratio(ratio)?;
    a.validate()?;
    b.validate()?;
    iou(&a.shrink(ratio), &b.shrink(ratio))
}

/// `gamma_w · ((p_x − g_x)² / w_g² + (p_y − g_y)² / h_g²)`.
pub fn wiou_loss(pred: &BBox, gt: &BBox, gamma_w: f64) -> Result<f64> {
    if !(gamma_w > 0.0) {
        return contract("gamma_w must be positive");
    }
    pred.validate()?;
    gt.validate()?;
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Ok(gamma_w * ((px - gx).powi(2) / gt.width().powi(2) + (py - gy).powi(2) / gt.height().powi(2)))
}

/// `L_WIoU + IoU − IoU_inner`.
pub fn inner_wiou_loss(pred: &BBox, gt: &BBox, ratio: f64, gamma_w: f64) -> Result<f64> {
    Ok(wiou_loss(pred, gt, gamma_w)? + (iou(pred, gt)? - inner_iou(pred, gt, ratio)?))
}

/// Scalar-valued pieces of one box on a tape, each of shape `[1]`.
struct BoxVars {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
}

impl BoxVars {
    fn from_corners(tape: &mut Tape, corners: Var) -> Result<Self> {
        let mut pick = |i| tape.gather(corners, vec![i], &[1]);
        Ok(BoxVars { x1: pick(0)?, y1: pick(1)?, x2: pick(2)?, y2: pick(3)? })
    }

    fn shrink(&self, tape: &mut Tape, ratio: f64) -> Result<Self> {
        // x' = c ± r·w/2 = x1·(1±r)/2 + x2·(1∓r)/2
        let (a, b) = ((1.0 + ratio) / 2.0, (1.0 - ratio) / 2.0);
        let mut mix = |lo: Var, hi: Var, wl: f64, wh: f64| -> Result<Var> {
            let l = tape.scale(lo, wl)?;
            let h = tape.scale(hi, wh)?;
            tape.add(l, h)
        };
        Ok(BoxVars {
            x1: mix(self.x1, self.x2, a, b)?,
            y1: mix(self.y1, self.y2, a, b)?,
            x2: mix(self.x1, self.x2, b, a)?,
            y2: mix(self.y1, self.y2, b, a)?,
        })
    }

    fn area(&self, tape: &mut Tape) -> Result<Var> {
        let w = tape.sub(self.x2, self.x1)?;
        let h = tape.sub(self.y2, self.y1)?;
        tape.mul(w, h)
    }
}

fn iou_vars(tape: &mut Tape, a: &BoxVars, b: &BoxVars) -> Result<Var> {
    let zero = tape.constant(Tensor::zeros(&[1]));
    let ix1 = tape.maximum(a.x1, b.x1)?;
    let ix2 = tape.minimum(a.x2, b.x2)?;
    let iy1 = tape.maximum(a.y1, b.y1)?;
    let iy2 = tape.minimum(a.y2, b.y2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.maximum(iw, zero)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.maximum(ih, zero)?;
    let inter = tape.mul(iw, ih)?;
    let aa = a.area(tape)?;
    let ab = b.area(tape)?;
    let sum = tape.add(aa, ab)?;
    let union = tape.sub(sum, inter)?;
    tape.div(inter, union)
}

/// Differentiable Inner-WIoU with respect to `pred_corners: [4]`
/// (`[xmin, ymin, xmax, ymax]`); returns a `[1]` loss.
pub fn inner_wiou_loss_var(tape: &mut Tape, pred_corners: Var, gt: &BBox, ratio: f64, gamma_w: f64) -> Result<Var> {
    check_ratio(ratio)?;
    if !(gamma_w > 0.0) {
        return contract("gamma_w must be positive");
    }
    gt.validate()?;
    if tape.shape(pred_corners) != [4] {
        return dim_err("inner_wiou_loss", tape.shape(pred_corners), &[4]);
    }
    BBox::try_from(<[f64; 4]>::try_from(tape.value(pred_corners).data()).expect("4 corners"))?;
    let p = BoxVars::from_corners(tape, pred_corners)?;
    let gt_corners = tape.constant(Tensor::vector(gt.as_array().to_vec())?);
    let g = BoxVars::from_corners(tape, gt_corners)?;

    let (gx, gy) = gt.center();
    let px = tape.add(p.x1, p.x2)?;
    let px = tape.scale(px, 0.5)?;
    let py = tape.add(p.y1, p.y2)?;
    let py = tape.scale(py, 0.5)?;
    let dx = tape.add_scalar(px, -gx)?;
    let dy = tape.add_scalar(py, -gy)?;
    let dx2 = tape.square(dx)?;
    let dy2 = tape.square(dy)?;
    let tx = tape.scale(dx2, gamma_w / gt.width().powi(2))?;
    let ty = tape.scale(dy2, gamma_w / gt.height().powi(2))?;
    let wiou = tape.add(tx, ty)?;

    let plain = iou_vars(tape, &p, &g)?;
    let ps = p.shrink(tape, ratio)?;
    let gs = g.shrink(tape, ratio)?;
    let inner = iou_vars(tape, &ps, &gs)?;
    let gap = tape.sub(plain, inner)?;
    tape.add(wiou, gap)
}
