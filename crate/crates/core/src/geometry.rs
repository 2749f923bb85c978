//! Axis-aligned boxes in corner form and the overlap measures used as
//! matching costs and stability scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `(x1, y1, x2, y2)` with `x2 >= x1`, `y2 >= y1` and
/// finite coordinates. Zero-area boxes are valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::validation("bbox", "coordinates must be finite"));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::validation(
                "bbox",
                format!("negative extent [{x1}, {y1}, {x2}, {y2}]"),
            ));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from two arbitrary corners, ordering them.
    pub fn from_corners(xa: f64, ya: f64, xb: f64, yb: f64) -> Result<Self> {
        Self::new(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb))
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Multiplies every coordinate by `s`. Panics-free: returns an error for
    /// non-positive or non-finite factors.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::validation(
                "scale",
                format!("{s} is not a positive factor"),
            ));
        }
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    fn hull_area(&self, other: &BBox) -> f64 {
        let w = self.x2.max(other.x2) - self.x1.min(other.x1);
        let h = self.y2.max(other.y2) - self.y1.min(other.y1);
        w * h
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Zero when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: `iou - |C \ (a ∪ b)| / |C|` with `C` the smallest
/// enclosing box. Falls back to plain IoU when `C` has no area.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull_area(b);
    let overlap = if union > 0.0 { inter / union } else { 0.0 };
    if hull <= 0.0 {
        return overlap;
    }
    (overlap - (hull - union) / hull).clamp(-1.0, 1.0)
}

/// `1 - giou(a, b)`, in `[0, 2]`.
pub fn giou_loss(a: &BBox, b: &BBox) -> f64 {
    1.0 - giou(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 1.0, 1.0), &bb(5.0, 5.0, 6.0, 6.0)), 0.0);
        let v = iou(&a, &bb(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn giou_examples() {
        let a = bb(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        let g = giou(&a, &bb(2.0, 0.0, 3.0, 1.0));
        assert!((g + 1.0 / 3.0).abs() < 1e-12);
        let far = giou(&a, &bb(1e6, 0.0, 1e6 + 1.0, 1.0));
        assert!(far < -0.999_99 && far > -1.0);
        assert!((giou_loss(&a, &a)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_are_total() {
        let p = bb(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(giou(&p, &p), 0.0);
        let line = bb(0.0, 0.0, 0.0, 4.0);
        let sq = bb(0.0, 0.0, 4.0, 4.0);
        assert_eq!(iou(&line, &sq), 0.0);
        assert!(giou(&line, &sq).is_finite());
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, f64::INFINITY, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0,0,-1,1]").is_err());
    }
}
