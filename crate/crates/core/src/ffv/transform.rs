//! Random per-step image transforms and their adjoints.
//!
//! A transform maps a `[C, H, W]` image to another of the same shape; the
//! adjoint carries an output gradient back to the input.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Ranges the per-step transforms are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSchedule {
    /// Circular shift of up to ±`shift` pixels along each axis.
    pub shift: usize,
    /// Uniform zoom factor range `[lo, hi]`.
    pub scale: (f32, f32),
    /// Random multiples of 90° (square images only).
    pub rotate: bool,
    /// Per-channel gain drawn from `1 ± color_jitter`.
    pub color_jitter: f32,
}

impl Default for TransformSchedule {
    fn default() -> Self {
        TransformSchedule {
            shift: 2,
            scale: (0.9, 1.1),
            rotate: true,
            color_jitter: 0.05,
        }
    }
}

impl TransformSchedule {
    pub fn none() -> Self {
        TransformSchedule {
            shift: 0,
            scale: (1.0, 1.0),
            rotate: false,
            color_jitter: 0.0,
        }
    }

    pub fn sample(&self, channels: usize, h: usize, w: usize, r: &mut Rng) -> Transform {
        let s = self.shift as i64;
        let shift = |r: &mut Rng| if s == 0 { 0 } else { r.random_range(-s..=s) };
        let dy = shift(r);
        let dx = shift(r);
        let (lo, hi) = self.scale;
        let zoom = if hi > lo { r.random_range(lo..=hi) } else { lo };
        let quarter_turns = if self.rotate {
            if h == w {
                r.random_range(0..4)
            } else {
                2 * r.random_range(0..2)
            }
        } else {
            0
        };
        let a = self.color_jitter;
        let gains = (0..channels)
            .map(|_| if a > 0.0 { 1.0 + r.random_range(-a..=a) } else { 1.0 })
            .collect();
        Transform {
            dy,
            dx,
            zoom,
            quarter_turns,
            gains,
        }
    }
}

/// One concrete draw: roll, then zoom, then rotate, then per-channel gain.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub dy: i64,
    pub dx: i64,
    pub zoom: f32,
    pub quarter_turns: u8,
    pub gains: Vec<f32>,
}

/// Bilinear taps `(index, weight)` for sampling coordinate `c` in `0..n`,
/// clamped at the border.
fn taps(c: f32, n: usize) -> [(usize, f32); 2] {
    let c = c.clamp(0.0, (n - 1) as f32);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let f = c - i0 as f32;
    [(i0, 1.0 - f), (i1, f)]
}

impl Transform {
    pub fn identity(channels: usize) -> Self {
        Transform {
            dy: 0,
            dx: 0,
            zoom: 1.0,
            quarter_turns: 0,
            gains: vec![1.0; channels],
        }
    }

    /// Source pixel of output `(y, x)` under the roll.
    fn roll_src(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        (
            (y as i64 - self.dy).rem_euclid(h as i64) as usize,
            (x as i64 - self.dx).rem_euclid(w as i64) as usize,
        )
    }

    /// Source pixel of output `(y, x)` under a counter-clockwise rotation.
    fn rot_src(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self.quarter_turns % 4 {
            0 => (y, x),
            1 => (x, w - 1 - y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (h - 1 - x, y),
        }
    }

    fn zoom_taps(&self, y: usize, x: usize, h: usize, w: usize) -> [[(usize, f32); 2]; 2] {
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        [
            taps((y as f32 - cy) / self.zoom + cy, h),
            taps((x as f32 - cx) / self.zoom + cx, w),
        ]
    }

    /// Applies the transform to a `[C, H, W]` buffer.
    pub fn apply(&self, img: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
        let plane = h * w;
        let mut rolled = vec![0f32; img.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = self.roll_src(y, x, h, w);
                    rolled[ch * plane + y * w + x] = img[ch * plane + sy * w + sx];
                }
            }
        }
        let mut zoomed = vec![0f32; img.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let [ty, tx] = self.zoom_taps(y, x, h, w);
                    let mut v = 0.0;
                    for (iy, wy) in ty {
                        for (ix, wx) in tx {
                            v += wy * wx * rolled[ch * plane + iy * w + ix];
                        }
                    }
                    zoomed[ch * plane + y * w + x] = v;
                }
            }
        }
        let mut out = vec![0f32; img.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = self.rot_src(y, x, h, w);
                    out[ch * plane + y * w + x] = self.gains[ch] * zoomed[ch * plane + sy * w + sx];
                }
            }
        }
        out
    }

    /// Transposes [`Transform::apply`]: maps an output gradient to the input.
    pub fn adjoint(&self, grad: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
        let plane = h * w;
        let mut zoomed = vec![0f32; grad.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = self.rot_src(y, x, h, w);
                    zoomed[ch * plane + sy * w + sx] += self.gains[ch] * grad[ch * plane + y * w + x];
                }
            }
        }
        let mut rolled = vec![0f32; grad.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let [ty, tx] = self.zoom_taps(y, x, h, w);
                    let g = zoomed[ch * plane + y * w + x];
                    for (iy, wy) in ty {
                        for (ix, wx) in tx {
                            rolled[ch * plane + iy * w + ix] += wy * wx * g;
                        }
                    }
                }
            }
        }
        let mut out = vec![0f32; grad.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = self.roll_src(y, x, h, w);
                    out[ch * plane + sy * w + sx] += rolled[ch * plane + y * w + x];
                }
            }
        }
        out
    }
}
