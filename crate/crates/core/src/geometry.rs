//! Axis-aligned boxes, overlap measures, crop transforms and the Hanning window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box: left, top, width, height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn x1(&self) -> f64 {
        self.x + self.w
    }

    pub fn y1(&self) -> f64 {
        self.y + self.h
    }

    pub fn cx(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x1().min(other.x1()) - self.x.max(other.x)).max(0.0);
        let h = (self.y1().min(other.y1()) - self.y.max(other.y)).max(0.0);
        w * h
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox::from_corners(
            self.x.min(other.x),
            self.y.min(other.y),
            self.x1().max(other.x1()),
            self.y1().max(other.y1()),
        )
    }

    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.x1().clamp(0.0, width);
        let y1 = self.y1().clamp(0.0, height);
        BBox::from_corners(x0, y0, x1.max(x0), y1.max(y0))
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    /// Mirror about the vertical centre line of a `res`-wide image.
    pub fn hflipped(&self, res: f64) -> BBox {
        BBox::new(res - self.x - self.w, self.y, self.w, self.h)
    }
}

/// Intersection over union. Two zero-area boxes have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`; 0 when the enclosing box is degenerate.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let enclosing = a.enclosing(b).area();
    if enclosing <= 0.0 {
        return 0.0;
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (enclosing - union) / enclosing
}

/// Maps frame pixels to a square `out_res` crop: `crop = (frame - offset) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub out_res: usize,
}

impl CropTransform {
    /// Square crop of side `side` frame pixels centred on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, side: f64, out_res: usize) -> Result<Self> {
        if !(side > 0.0) || !side.is_finite() || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Geometry(format!("invalid crop side {side} at ({cx}, {cy})")));
        }
        if out_res == 0 {
            return Err(Error::Geometry("crop output resolution is zero".into()));
        }
        Ok(Self {
            scale: out_res as f64 / side,
            offset_x: cx - side / 2.0,
            offset_y: cy - side / 2.0,
            out_res,
        })
    }

    /// Side length of the cropped region in frame pixels.
    pub fn side(&self) -> f64 {
        self.out_res as f64 / self.scale
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.offset_x) * self.scale, (y - self.offset_y) * self.scale)
    }

    pub fn invert_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale + self.offset_x, y / self.scale + self.offset_y)
    }

    /// Frame coordinates to crop coordinates.
    pub fn apply(&self, b: &BBox) -> BBox {
        let (x, y) = self.apply_point(b.x, b.y);
        BBox::new(x, y, b.w * self.scale, b.h * self.scale)
    }

    /// Crop coordinates back to frame coordinates.
    pub fn invert(&self, b: &BBox) -> BBox {
        let (x, y) = self.invert_point(b.x, b.y);
        BBox::new(x, y, b.w / self.scale, b.h / self.scale)
    }
}

/// Crop whose side is `area_factor * sqrt(w * h)` of the target, centred on it, so the crop
/// covers `area_factor²` times the target area.
pub fn make_crop(center_box: &BBox, area_factor: f64, out_res: usize) -> Result<CropTransform> {
    if !center_box.is_valid() || center_box.area() <= 0.0 {
        return Err(Error::Geometry(format!("crop target {center_box:?} has no area")));
    }
    if !(area_factor >= 1.0) {
        return Err(Error::Geometry(format!("area factor {area_factor} must be at least 1")));
    }
    let side = area_factor * (center_box.w * center_box.h).sqrt();
    CropTransform::centered(center_box.cx(), center_box.cy(), side, out_res)
}

/// Symmetric raised-cosine window `0.5 (1 - cos(2πi / (n-1)))`.
pub fn hanning_1d(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Geometry(format!("hanning window needs n >= 2, got {n}")));
    }
    let denom = (n - 1) as f64;
    // evaluate the first half and mirror it so the window is exactly symmetric
    Ok((0..n)
        .map(|i| {
            let k = i.min(n - 1 - i) as f64;
            0.5 * (1.0 - (2.0 * std::f64::consts::PI * k / denom).cos())
        })
        .collect())
}

/// Outer product of two 1-D windows, row-major `n × n`.
pub fn hanning_2d(n: usize) -> Result<Vec<f64>> {
    let w = hanning_1d(n)?;
    Ok(w.iter().flat_map(|a| w.iter().map(move |b| a * b)).collect())
}
