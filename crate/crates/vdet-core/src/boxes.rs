//! Axis-aligned boxes shared by data handling, decoding, and evaluation.

/// Box in pixel coordinates with exclusive ordering invariants
/// (`left < right`, `top < bottom`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box2 {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl Box2 {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Box2 { left, top, right, bottom }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box2 { left: cx - w / 2.0, top: cy - h / 2.0, right: cx + w / 2.0, bottom: cy + h / 2.0 }
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f64 {
        (self.right - self.left).max(0.0) * (self.bottom - self.top).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.left + self.right) / 2.0, (self.top + self.bottom) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.left < self.right && self.top < self.bottom
    }

    pub fn clipped(&self, w: f64, h: f64) -> Box2 {
        Box2 {
            left: self.left.clamp(0.0, w),
            top: self.top.clamp(0.0, h),
            right: self.right.clamp(0.0, w),
            bottom: self.bottom.clamp(0.0, h),
        }
    }

    pub fn intersection_area(&self, other: &Box2) -> f64 {
        let w = self.right.min(other.right) - self.left.max(other.left);
        let h = self.bottom.min(other.bottom) - self.top.max(other.top);
        w.max(0.0) * h.max(0.0)
    }
}

/// Scored prediction for one object.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionBox {
    pub class: usize,
    pub confidence: f64,
    pub bbox: Box2,
}
