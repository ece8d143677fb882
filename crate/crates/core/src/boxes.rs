//! Axis-aligned boxes in image-pixel coordinates.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.as_array().iter().all(|v| v.is_finite())
    }

    /// Area, zero for degenerate boxes.
    pub fn area(&self) -> f64 {
        if self.is_valid() {
            self.width() * self.height()
        } else {
            0.0
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Intersection over union; degenerate boxes have IoU 0 with everything.
    pub fn iou(&self, other: &BBox) -> f64 {
        if !self.is_valid() || !other.is_valid() {
            return 0.0;
        }
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Regression target `(dx, dy, dw, dh)` taking `self` to `target`.
    pub fn encode(&self, target: &BBox) -> [f64; 4] {
        let (cx, cy) = self.center();
        let (w, h) = (self.width(), self.height());
        let (tx, ty) = target.center();
        [
            (tx - cx) / w,
            (ty - cy) / h,
            (target.width() / w).ln(),
            (target.height() / h).ln(),
        ]
    }

    /// Inverse of [`BBox::encode`]; size deltas are clamped to keep `exp` finite.
    pub fn decode(&self, d: [f64; 4]) -> BBox {
        const MAX_LOG: f64 = 4.135; // ln(1000/16)
        let (cx, cy) = self.center();
        let (w, h) = (self.width(), self.height());
        let ncx = cx + d[0] * w;
        let ncy = cy + d[1] * h;
        let nw = w * d[2].min(MAX_LOG).exp();
        let nh = h * d[3].min(MAX_LOG).exp();
        BBox {
            x1: ncx - 0.5 * nw,
            y1: ncy - 0.5 * nh,
            x2: ncx + 0.5 * nw,
            y2: ncy + 0.5 * nh,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_hand_values() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(a.iou(&BBox::new(1.0, 1.0, 1.0, 3.0)), 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = a.iou(&b);
            prop_assert!((ab - b.iou(&a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn encode_decode_inverse(a in arb_box(), b in arb_box()) {
            let d = a.encode(&b);
            let r = a.decode(d);
            for (x, y) in r.as_array().iter().zip(b.as_array()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
