//! Boxes, annotations and detections shared across the pipeline.

use serde::{Deserialize, Serialize};

/// Dense per-family class index (0..C-1).
pub type ClassId = usize;

/// Axis-aligned box: top-left corner plus size, in original-image pixels.
///
/// Coordinates are continuous; a box covers `[x, x+w) x [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self { x, y, w, h }
    }

    /// Box from a continuous center point and size.
    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn x_max(&self) -> f32 {
        self.x + self.w
    }

    pub fn y_max(&self) -> f32 {
        self.y + self.h
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    /// Positive size and fully inside a `side x side` image.
    pub fn is_valid_within(&self, width: f32, height: f32) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x_max() <= width
            && self.y_max() <= height
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x < other.x_max()
            && other.x < self.x_max()
            && self.y < other.y_max()
            && other.y < self.y_max()
    }

    /// Grow by `m` pixels on every side.
    pub fn inflate(&self, m: f32) -> BBox {
        BBox {
            x: self.x - m,
            y: self.y - m,
            w: self.w + 2.0 * m,
            h: self.h + 2.0 * m,
        }
    }

    /// Clamp the box to `[0, width] x [0, height]`. An axis already inside
    /// the bounds is passed through bit-exactly.
    pub fn clip(&self, width: f32, height: f32) -> BBox {
        let (x, w) = if self.x >= 0.0 && self.x_max() <= width {
            (self.x, self.w)
        } else {
            let x0 = self.x.max(0.0);
            (x0, self.x_max().min(width) - x0)
        };
        let (y, h) = if self.y >= 0.0 && self.y_max() <= height {
            (self.y, self.h)
        } else {
            let y0 = self.y.max(0.0);
            (y0, self.y_max().min(height) - y0)
        };
        BBox { x, y, w, h }
    }
}

/// Ground-truth defect instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: ClassId,
    pub bbox: BBox,
}

/// Scored model output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: ClassId,
    pub bbox: BBox,
    pub score: f32,
}
