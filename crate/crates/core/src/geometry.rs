//! Axis-aligned box arithmetic in image pixel coordinates.
//!
//! Boxes are stored in corner form: `(x1, y1)` is the left-top corner,
//! `(x2, y2)` the right-bottom corner, with `x` growing rightward and `y`
//! growing downward. All downstream scoring works on the side distances of a
//! location to a box (`Ltrb`), so those live here too.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x1}, {y1}) .. ({x2}, {y2}): corners must be finite with x1 <= x2 and y1 <= y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// A location in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Distances from a location to the four sides of a box: left, top, right,
/// bottom. A location is strictly inside the box exactly when all four are
/// positive; negative components say how far outside it sits on that side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ltrb {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl Ltrb {
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        Self { l, t, r, b }
    }

    /// Smallest of the four side distances.
    pub fn min(&self) -> f64 {
        self.l.min(self.t).min(self.r).min(self.b)
    }

    /// Largest of the four side distances. This is the quantity that decides
    /// which pyramid level a location is responsible for.
    pub fn max(&self) -> f64 {
        self.l.max(self.t).max(self.r).max(self.b)
    }

    /// True when the location these distances were measured from lies
    /// strictly inside the box.
    pub fn all_positive(&self) -> bool {
        self.min() > 0.0
    }
}

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting flipped or non-finite corners. Degenerate
    /// (zero-extent) boxes are allowed; they have zero area and strictly
    /// contain nothing.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from left-top corner plus width/height (the COCO `bbox`
    /// layout). Negative extents are rejected.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
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

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Side distances from `p` to this box.
    pub fn ltrb(&self, p: Point) -> Ltrb {
        Ltrb::new(p.x - self.x1, p.y - self.y1, self.x2 - p.x, self.y2 - p.y)
    }

    /// True when `p` lies strictly inside the box (all side distances > 0).
    pub fn strictly_contains(&self, p: Point) -> bool {
        p.x > self.x1 && p.x < self.x2 && p.y > self.y1 && p.y < self.y2
    }

    /// True when `p` lies inside the box or on its boundary.
    pub fn contains_closed(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union. Returns 0 when the union is empty (two
    /// degenerate boxes), so the result is always a well-defined value in
    /// `[0, 1]`.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clamps the box into `[0, width] x [0, height]`. A box entirely outside
    /// collapses to a degenerate box on the border.
    pub fn clip_to(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_flipped_and_non_finite_corners() {
        assert!(BBox::new(5.0, 0.0, 1.0, 4.0).is_err());
        assert!(BBox::new(0.0, 5.0, 4.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
        assert!(BBox::from_xywh(0.0, 0.0, -1.0, 2.0).is_err());
    }

    #[test]
    fn iou_of_half_overlapping_boxes_is_one_third() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        // intersection 50, union 150
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BBox::new(2.0, 3.0, 9.0, 8.0).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        let far = BBox::new(100.0, 100.0, 110.0, 104.0).unwrap();
        assert_eq!(a.iou(&far), 0.0);
        // touching edges intersect with zero area
        let touch = BBox::new(9.0, 3.0, 12.0, 8.0).unwrap();
        assert_eq!(a.iou(&touch), 0.0);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = BBox::new(4.0, 4.0, 4.0, 4.0).unwrap();
        assert_eq!(p.iou(&p), 0.0);
        assert_eq!(p.area(), 0.0);
    }

    #[test]
    fn ltrb_measures_side_distances() {
        let b = BBox::new(10.0, 20.0, 50.0, 60.0).unwrap();
        let d = b.ltrb(Point::new(15.0, 45.0));
        assert_eq!(d, Ltrb::new(5.0, 25.0, 35.0, 15.0));
        assert_eq!(d.min(), 5.0);
        assert_eq!(d.max(), 35.0);
        assert!(d.all_positive());

        // outside on the left: l goes negative
        let out = b.ltrb(Point::new(8.0, 45.0));
        assert_eq!(out.l, -2.0);
        assert!(!out.all_positive());
    }

    #[test]
    fn clip_keeps_corner_order() {
        let b = BBox::new(-10.0, -5.0, 200.0, 40.0).unwrap();
        let c = b.clip_to(100.0, 30.0);
        assert_eq!(c, BBox::new(0.0, 0.0, 100.0, 30.0).unwrap());

        let outside = BBox::new(-20.0, -20.0, -10.0, -10.0).unwrap();
        let collapsed = outside.clip_to(100.0, 100.0);
        assert_eq!(collapsed, BBox::new(0.0, 0.0, 0.0, 0.0).unwrap());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..500.0f64, 0.0..500.0f64, 0.1..300.0f64, 0.1..300.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = a.iou(&b);
            let ba = b.iou(&a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn strict_containment_matches_positive_ltrb(
            a in arb_box(),
            px in -10.0..600.0f64,
            py in -10.0..600.0f64,
        ) {
            let p = Point::new(px, py);
            prop_assert_eq!(a.strictly_contains(p), a.ltrb(p).all_positive());
        }

        #[test]
        fn ltrb_round_trips_to_the_same_box(a in arb_box(), fx in 0.01..0.99f64, fy in 0.01..0.99f64) {
            // pick an interior point, measure distances, rebuild the corners
            let p = Point::new(a.x1 + fx * a.width(), a.y1 + fy * a.height());
            let d = a.ltrb(p);
            let rebuilt = BBox::new(p.x - d.l, p.y - d.t, p.x + d.r, p.y + d.b).unwrap();
            prop_assert!((rebuilt.x1 - a.x1).abs() < 1e-9);
            prop_assert!((rebuilt.y1 - a.y1).abs() < 1e-9);
            prop_assert!((rebuilt.x2 - a.x2).abs() < 1e-9);
            prop_assert!((rebuilt.y2 - a.y2).abs() < 1e-9);
        }
    }
}
