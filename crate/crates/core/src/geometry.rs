use serde::{Deserialize, Serialize};

/// Axis-aligned pixel rectangle; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub const fn full(width: usize, height: usize) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.right() <= width && self.bottom() <= height
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x = self.x.max(other.x);
        let y = self.y.max(other.y);
        let right = self.right().min(other.right());
        let bottom = self.bottom().min(other.bottom());
        (right > x && bottom > y).then(|| Rect::new(x, y, right - x, bottom - y))
    }

    /// Clips to `[0,width)×[0,height)`; `None` when nothing remains.
    pub fn clip(&self, width: usize, height: usize) -> Option<Rect> {
        self.intersection(&Rect::full(width, height))
    }

    /// Corners clockwise from the top-left.
    pub fn polygon(&self) -> [(usize, usize); 4] {
        [
            (self.x, self.y),
            (self.right(), self.y),
            (self.right(), self.bottom()),
            (self.x, self.bottom()),
        ]
    }
}

/// Intersection over union; 0 when disjoint or both empty.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection(b).map_or(0, |r| r.area());
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
