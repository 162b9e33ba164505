//! Center-head classification loss, box regression losses, and their
//! weighted combination.

use serde::{Deserialize, Serialize};
use tokentrack_tensor::{Graph, Tensor, Var};

use crate::bbox::BBox;
use crate::error::{contract, Result};

pub const GIOU_WEIGHT: f64 = 2.0;
pub const L1_WEIGHT: f64 = 5.0;
pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const PROB_CLAMP: f64 = 1e-12;

/// Regression weights of the total loss; the classification weight is 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            giou: GIOU_WEIGHT,
            l1: L1_WEIGHT,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.giou >= 0.0 && self.l1 >= 0.0 && self.giou.is_finite() && self.l1.is_finite()) {
            return Err(crate::error::Error::Config(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn total(&self, cls: f64, giou: f64, l1: f64) -> f64 {
        cls + self.giou * giou + self.l1 * l1
    }
}

/// Loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Components with the default weights.
    pub fn compose(cls: f64, giou: f64, l1: f64) -> Self {
        Self::weighted(&LossWeights::default(), cls, giou, l1)
    }

    pub fn weighted(w: &LossWeights, cls: f64, giou: f64, l1: f64) -> Self {
        Self {
            cls,
            giou,
            l1,
            total: w.total(cls, giou, l1),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.giou, self.l1, self.total].iter().all(|v| v.is_finite())
    }
}

/// `cls + 2·giou + 5·l1`
pub fn total_loss(cls: f64, giou: f64, l1: f64) -> f64 {
    LossWeights::default().total(cls, giou, l1)
}

/// Graph form of [`LossWeights::total`], same evaluation order.
pub fn total_loss_var(g: &mut Graph, w: &LossWeights, cls: Var, giou: Var, l1: Var) -> Result<Var> {
    let wg = g.scale(giou, w.giou);
    let wl = g.scale(l1, w.l1);
    let t = g.add(cls, wg)?;
    Ok(g.add(t, wl)?)
}

/// Gaussian heat map over the `G×G` grid with a single unit peak.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub grid: usize,
    pub peak: (usize, usize),
    pub values: Vec<f64>,
}

impl TargetMap {
    pub fn peak_index(&self) -> usize {
        self.peak.0 * self.grid + self.peak.1
    }
}

/// Peak at cell `(⌊cy·G⌋, ⌊cx·G⌋)`; `σ = max(1, G·min(w, h)/4)` cells.
pub fn make_target_map(gt: &BBox, grid: usize) -> Result<TargetMap> {
    if !(0.0..=1.0).contains(&gt.cx) || !(0.0..=1.0).contains(&gt.cy) {
        return contract(format!("target center ({}, {}) outside the unit square", gt.cx, gt.cy));
    }
    let cell = |v: f64| ((v * grid as f64).floor() as usize).min(grid - 1);
    let peak = (cell(gt.cy), cell(gt.cx));
    let sigma = (grid as f64 * gt.w.min(gt.h) / 4.0).max(1.0);
    let mut values = vec![0.0; grid * grid];
    for i in 0..grid {
        for j in 0..grid {
            let di = i as f64 - peak.0 as f64;
            let dj = j as f64 - peak.1 as f64;
            values[i * grid + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    Ok(TargetMap { grid, peak, values })
}

/// Penalty-reduced focal loss, normalized by the number of peak cells.
///
/// Peak cells: `−(1−p)^α ln p`; elsewhere `−(1−y)^β p^α ln(1−p)`.
/// Predictions are clamped to `[ε, 1−ε]`; the flag reports whether that
/// happened.
pub fn focal_loss(g: &mut Graph, pred: Var, target: &TargetMap) -> Result<(Var, bool)> {
    let n = g.value(pred).numel();
    if n != target.values.len() {
        return contract(format!("{n} predictions for a {}-cell target", target.values.len()));
    }
    let pos: Vec<f64> = target.values.iter().map(|&y| f64::from(u8::from(y == 1.0))).collect();
    let npos = pos.iter().sum::<f64>().max(1.0);
    let neg: Vec<f64> = target
        .values
        .iter()
        .map(|&y| if y == 1.0 { 0.0 } else { (1.0 - y).powi(FOCAL_BETA) })
        .collect();
    let flat = g.reshape(pred, vec![n])?;
    let (p, clamped) = g.clamp(flat, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = g.affine(p, -1.0, 1.0);
    let ln_p = g.ln(p);
    let ln_q = g.ln(q);
    let q_pow = powi(g, q, FOCAL_ALPHA)?;
    let p_pow = powi(g, p, FOCAL_ALPHA)?;
    let pos_term = g.mul(q_pow, ln_p)?;
    let neg_term = g.mul(p_pow, ln_q)?;
    let pos_w = g.constant(Tensor::from_vec(vec![n], pos));
    let neg_w = g.constant(Tensor::from_vec(vec![n], neg));
    let a = g.mul(pos_term, pos_w)?;
    let b = g.mul(neg_term, neg_w)?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok((g.scale(s, -1.0 / npos), clamped))
}

fn powi(g: &mut Graph, x: Var, k: i32) -> Result<Var> {
    let mut acc = x;
    for _ in 1..k {
        acc = g.mul(acc, x)?;
    }
    Ok(acc)
}

/// Predicted box as four single-element graph values `(cx, cy, w, h)`.
pub type BoxVars = [Var; 4];

struct Corners {
    x1: Var,
    y1: Var,
    x2: Var,
    y2: Var,
}

fn corners(g: &mut Graph, b: &BoxVars) -> Result<Corners> {
    let hw = g.scale(b[2], 0.5);
    let hh = g.scale(b[3], 0.5);
    Ok(Corners {
        x1: g.sub(b[0], hw)?,
        y1: g.sub(b[1], hh)?,
        x2: g.add(b[0], hw)?,
        y2: g.add(b[1], hh)?,
    })
}

fn box_constants(g: &mut Graph, b: &BBox) -> BoxVars {
    b.as_array().map(|v| g.constant(Tensor::scalar(v)))
}

/// `1 − GIoU`, with `GIoU = IoU − (hull − union)/hull`. In `[0, 2)`.
pub fn giou_loss(g: &mut Graph, pred: &BoxVars, gt: &BBox) -> Result<Var> {
    gt.validate()?;
    for v in pred {
        let x = g.value(*v).numel();
        if x != 1 {
            return contract("box components must be scalars");
        }
    }
    let pw = g.value(pred[2]).item();
    let ph = g.value(pred[3]).item();
    if !(pw > 0.0 && ph > 0.0) {
        return contract(format!("degenerate predicted box size ({pw}, {ph})"));
    }
    let gv = box_constants(g, gt);
    let p = corners(g, pred)?;
    let t = corners(g, &gv)?;
    let zero = g.constant(Tensor::scalar(0.0));

    let ix1 = g.maximum(p.x1, t.x1)?;
    let iy1 = g.maximum(p.y1, t.y1)?;
    let ix2 = g.minimum(p.x2, t.x2)?;
    let iy2 = g.minimum(p.y2, t.y2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.maximum(iw, zero)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.maximum(ih, zero)?;
    let inter = g.mul(iw, ih)?;

    let area_p = g.mul(pred[2], pred[3])?;
    let area_t = g.mul(gv[2], gv[3])?;
    let union = g.add(area_p, area_t)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;

    let hx1 = g.minimum(p.x1, t.x1)?;
    let hy1 = g.minimum(p.y1, t.y1)?;
    let hx2 = g.maximum(p.x2, t.x2)?;
    let hy2 = g.maximum(p.y2, t.y2)?;
    let hw = g.sub(hx2, hx1)?;
    let hh = g.sub(hy2, hy1)?;
    let hull = g.mul(hw, hh)?;
    let gap = g.sub(hull, union)?;
    let gap = g.div(gap, hull)?;
    let giou = g.sub(iou, gap)?;
    Ok(g.affine(giou, -1.0, 1.0))
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_loss(g: &mut Graph, pred: &BoxVars, gt: &BBox) -> Result<Var> {
    let gv = box_constants(g, gt);
    let mut acc: Option<Var> = None;
    for k in 0..4 {
        let d = g.sub(pred[k], gv[k])?;
        let d = g.abs(d);
        acc = Some(match acc {
            Some(a) => g.add(a, d)?,
            None => d,
        });
    }
    Ok(g.scale(acc.expect("four terms"), 0.25))
}

/// Evaluates a loss on constant boxes.
pub fn box_loss_value(pred: &BBox, gt: &BBox, f: impl Fn(&mut Graph, &BoxVars, &BBox) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let p = box_constants(&mut g, pred);
    let v = f(&mut g, &p, gt)?;
    Ok(g.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.0, 0.5, 0.2), 3.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0), 0.0);
        let b = LossBreakdown::compose(0.3, 0.7, 0.11);
        assert_eq!(b.total, 0.3 + 2.0 * 0.7 + 5.0 * 0.11);
    }

    #[test]
    fn total_gradient_weights() {
        let mut g = Graph::new();
        let c = g.param(Tensor::scalar(1.0));
        let gi = g.param(Tensor::scalar(0.5));
        let l = g.param(Tensor::scalar(0.2));
        let t = total_loss_var(&mut g, &LossWeights::default(), c, gi, l).unwrap();
        assert_eq!(g.value(t).item(), 3.0);
        g.backward(t).unwrap();
        assert_eq!(g.grad(c).unwrap().item(), 1.0);
        assert_eq!(g.grad(gi).unwrap().item(), 2.0);
        assert_eq!(g.grad(l).unwrap().item(), 5.0);
    }

    #[test]
    fn target_map_peak_and_symmetry() {
        let t = make_target_map(&BBox::new(0.5, 0.5, 0.25, 0.25), 8).unwrap();
        assert_eq!(t.peak, (4, 4));
        assert_eq!(t.values[t.peak_index()], 1.0);
        assert_eq!(t.values.iter().filter(|&&v| v == 1.0).count(), 1);
        // symmetric about the peak cell
        for d in 1..4 {
            assert_eq!(t.values[4 * 8 + 4 - d], t.values[4 * 8 + 4 + d]);
            assert_eq!(t.values[(4 - d) * 8 + 4], t.values[(4 + d) * 8 + 4]);
            assert_eq!(t.values[(4 - d) * 8 + 4], t.values[4 * 8 + 4 + d]);
        }
        assert!(make_target_map(&BBox::new(1.2, 0.5, 0.1, 0.1), 8).is_err());
    }

    #[test]
    fn giou_examples() {
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let b = BBox::from_corners(1.0, 1.0, 2.0, 2.0);
        assert_eq!(box_loss_value(&a, &a, giou_loss).unwrap(), 0.0);
        assert!((box_loss_value(&a, &b, giou_loss).unwrap() - 1.5).abs() < 1e-15);
        let far = BBox::from_corners(1e6, 1e6, 1e6 + 1.0, 1e6 + 1.0);
        assert!((box_loss_value(&a, &far, giou_loss).unwrap() - 2.0).abs() < 1e-5);
        let flat = BBox::new(0.5, 0.5, 0.0, 1.0);
        assert!(box_loss_value(&a, &flat, giou_loss).is_err());
        assert!(box_loss_value(&flat, &a, giou_loss).is_err());
    }

    #[test]
    fn l1_examples() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.3);
        assert_eq!(box_loss_value(&a, &a, l1_loss).unwrap(), 0.0);
        let shifted = a.translate(0.1, 0.0);
        assert!((box_loss_value(&shifted, &a, l1_loss).unwrap() - 0.025).abs() < 1e-15);
        assert_eq!(
            box_loss_value(&shifted, &a, l1_loss).unwrap(),
            box_loss_value(&a, &shifted, l1_loss).unwrap()
        );
    }
}
