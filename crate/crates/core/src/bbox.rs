use crate::error::{contract, Result};

/// Axis-aligned box as center and size.
///
/// The same type carries normalized search-crop coordinates (inside the
/// model) and frame pixel coordinates (at the tracker boundary).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// From top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self {
            cx: x + 0.5 * w,
            cy: y + 0.5 * h,
            w,
            h,
        }
    }

    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() || !(self.w > 0.0) || !(self.h > 0.0) {
            return contract(format!("degenerate box {self:?}"));
        }
        Ok(())
    }

    /// Intersection with the rectangle `[0, width] × [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let x1 = self.x1().clamp(0.0, width);
        let y1 = self.y1().clamp(0.0, height);
        let x2 = self.x2().clamp(0.0, width);
        let y2 = self.y2().clamp(0.0, height);
        Self::from_corners(x1, y1, x2, y2)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1().max(other.x1())).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1().max(other.y1())).max(0.0);
        iw * ih
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }
}

/// Intersection over union in `[0, 1]`; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
