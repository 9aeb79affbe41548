//! Axis-aligned boxes on an integer grid.
//!
//! A box `[x1, y1, x2, y2]` covers the cells `[x1, x2) x [y1, y2)`, so its area
//! equals the number of grid cells it contains.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
}

impl BoundingBox {
    /// Builds a box on a grid of size `grid`, checking positive area and that
    /// every coordinate lies in `[0, grid]`.
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32, grid: u32) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(LabError::InvalidArgument(format!(
                "box [{x1},{y1},{x2},{y2}] has non-positive area"
            )));
        }
        if x2 > grid || y2 > grid {
            return Err(LabError::InvalidArgument(format!(
                "box [{x1},{y1},{x2},{y2}] exceeds grid {grid}"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Like [`BoundingBox::new`] but returns `None` on any invariant violation.
    pub fn checked(x1: i64, y1: i64, x2: i64, y2: i64, grid: u32) -> Option<Self> {
        let g = i64::from(grid);
        let in_range = |v: i64| (0..=g).contains(&v);
        if x1 < x2 && y1 < y2 && [x1, y1, x2, y2].into_iter().all(in_range) {
            Some(Self {
                x1: x1 as u32,
                y1: y1 as u32,
                x2: x2 as u32,
                y2: y2 as u32,
            })
        } else {
            None
        }
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn intersection_area(&self, other: &Self) -> u64 {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        u64::from(w) * u64::from(h)
    }

    /// Intersection over union. Always in `[0, 1]`; 0 exactly when the boxes
    /// share no cell.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x1, self.y1, self.x2, self.y2)
    }
}

pub fn area(b: &BoundingBox) -> u64 {
    b.area()
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: u32, y1: u32, x2: u32, y2: u32) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2, 32).unwrap()
    }

    /// Counts covered cells one by one.
    fn cell_iou(a: &BoundingBox, b: &BoundingBox, grid: u32) -> f64 {
        let inside = |bb: &BoundingBox, x: u32, y: u32| {
            let [x1, y1, x2, y2] = bb.coords();
            x >= x1 && x < x2 && y >= y1 && y < y2
        };
        let (mut inter, mut union) = (0u64, 0u64);
        for x in 0..grid {
            for y in 0..grid {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += u64::from(ia && ib);
                union += u64::from(ia || ib);
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn areas() {
        assert_eq!(bx(0, 0, 10, 10).area(), 100);
        assert_eq!(bx(0, 0, 1, 1).area(), 1);
        assert_eq!(bx(2, 3, 5, 9).area(), 18);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0, 0, 10, 10), &bx(0, 0, 10, 10)), 1.0);
        assert_eq!(iou(&bx(0, 0, 2, 2), &bx(4, 4, 6, 6)), 0.0);
        assert_eq!(iou(&bx(0, 0, 2, 2), &bx(1, 1, 3, 3)), 1.0 / 7.0);
        // touching edges share no cell
        assert_eq!(iou(&bx(0, 0, 2, 2), &bx(2, 0, 4, 2)), 0.0);
    }

    #[test]
    fn rejects_degenerate_and_out_of_grid() {
        assert!(BoundingBox::new(3, 0, 3, 4, 16).is_err());
        assert!(BoundingBox::new(0, 5, 4, 2, 16).is_err());
        assert!(BoundingBox::new(0, 0, 17, 4, 16).is_err());
        assert!(BoundingBox::new(0, 0, 16, 16, 16).is_ok());
        assert!(BoundingBox::checked(-1, 0, 2, 2, 16).is_none());
    }

    fn arb_box(grid: u32) -> impl Strategy<Value = BoundingBox> {
        (0..grid, 0..grid, 1..=grid, 1..=grid).prop_filter_map("positive area", move |(a, b, c, d)| {
            BoundingBox::checked(a.into(), b.into(), c.into(), d.into(), grid)
        })
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_box(32), b in arb_box(32)) {
            let ab = a.iou(&b);
            prop_assert_eq!(ab, b.iou(&a));
            prop_assert_eq!(a.iou(&a), 1.0);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 0.0, a.intersection_area(&b) == 0);
        }

        #[test]
        fn closed_form_matches_cell_count(a in arb_box(32), b in arb_box(32)) {
            prop_assert_eq!(a.iou(&b), cell_iou(&a, &b, 32));
        }
    }
}
