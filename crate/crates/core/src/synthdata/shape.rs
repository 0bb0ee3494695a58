use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    StripeBand,
}

/// Where a shape sits in the frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub cx: f32,
    pub cy: f32,
    /// Shape extent in pixels.
    pub extent: f32,
    /// Rotation in radians.
    pub angle: f32,
}

impl Placement {
    /// Extent 75–180% of the frame; large shapes fill most of it.
    pub fn sample(h: usize, w: usize, r: &mut Rng) -> Self {
        let side = h.min(w) as f32;
        let extent = side * r.random_range(0.75..1.8);
        let margin = (extent * 0.3).min(side * 0.4);
        let cx = r.random_range(margin..(w as f32 - margin).max(margin + 1e-3));
        let cy = r.random_range(margin..(h as f32 - margin).max(margin + 1e-3));
        Placement {
            cx,
            cy,
            extent,
            angle: r.random_range(0.0..std::f32::consts::TAU),
        }
    }
}

impl ShapeKind {
    pub fn contains(self, p: &Placement, x: f32, y: f32) -> bool {
        let (s, c) = p.angle.sin_cos();
        let (dx, dy) = (x - p.cx, y - p.cy);
        // rotate into the shape frame
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let r = p.extent / 2.0;
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => u.abs() <= r * 0.85 && v.abs() <= r * 0.85,
            ShapeKind::Triangle => {
                // equilateral, circumradius r
                let k = 3f32.sqrt();
                v >= -r / 2.0 && k * u + v <= r && -k * u + v <= r
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.45 * r).powi(2)
            }
            ShapeKind::Cross => {
                let arm = r * 0.38;
                (u.abs() <= arm && v.abs() <= r) || (v.abs() <= arm && u.abs() <= r)
            }
            ShapeKind::StripeBand => v.abs() <= r * 0.45,
        }
    }

    pub fn mask(self, p: &Placement, h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| self.contains(p, (i % w) as f32, (i / w) as f32))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn every_shape_covers_a_sizeable_area() {
        let mut r = rng::rng(1);
        for shape in [
            ShapeKind::Disk,
            ShapeKind::Square,
            ShapeKind::Triangle,
            ShapeKind::Ring,
            ShapeKind::Cross,
            ShapeKind::StripeBand,
        ] {
            for _ in 0..20 {
                let p = Placement::sample(32, 32, &mut r);
                let area = shape.mask(&p, 32, 32).iter().filter(|&&b| b).count();
                assert!(area >= 60, "{shape:?} area {area}");
            }
        }
    }
}
