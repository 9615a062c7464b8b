//! Axis-aligned boxes in pixel coordinates (top-left origin) and IoU.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A box as (x, y, w, h), matching the annotation-file convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> Rect<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> T {
        self.x + self.w
    }

    pub fn bottom(&self) -> T {
        self.y + self.h
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn center(&self) -> (T, T) {
        let two = T::from_f64(2.0);
        (self.x + self.w / two, self.y + self.h / two)
    }

    pub fn max_side(&self) -> T {
        self.w.max(self.h)
    }

    /// True when `other` lies inside `self`, boundary contact allowed.
    pub fn contains(&self, other: &Rect<T>) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// True when `other` lies inside `self` without touching the boundary.
    pub fn contains_strictly(&self, other: &Rect<T>) -> bool {
        other.x > self.x
            && other.y > self.y
            && other.right() < self.right()
            && other.bottom() < self.bottom()
    }

    /// Clamp to `[0, width] x [0, height]`. The result may be degenerate
    /// (zero width or height) when the box lies fully outside.
    pub fn clamp_to(&self, width: T, height: T) -> Rect<T> {
        let x0 = self.x.max(T::zero()).min(width);
        let y0 = self.y.max(T::zero()).min(height);
        let x1 = self.right().max(T::zero()).min(width);
        let y1 = self.bottom().max(T::zero()).min(height);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.w <= T::zero() || self.h <= T::zero()
    }
}

/// Intersection-over-union of two boxes. Zero when the union has no area.
pub fn iou<T: Scalar>(a: &Rect<T>, b: &Rect<T>) -> T {
    let ix = (a.right().min(b.right()) - a.x.max(b.x)).max(T::zero());
    let iy = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(T::zero());
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}
