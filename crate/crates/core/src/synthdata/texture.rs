use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    Stripes,
    Dots,
    Checker,
    Honeycomb,
    Zigzag,
    PlainNoise,
}

impl TextureKind {
    pub const ALL: [TextureKind; 6] = [
        TextureKind::Stripes,
        TextureKind::Dots,
        TextureKind::Checker,
        TextureKind::Honeycomb,
        TextureKind::Zigzag,
        TextureKind::PlainNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Dots => "dots",
            TextureKind::Checker => "checker",
            TextureKind::Honeycomb => "honeycomb",
            TextureKind::Zigzag => "zigzag",
            TextureKind::PlainNoise => "plain-noise",
        }
    }
}

impl fmt::Display for TextureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TextureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TextureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = TextureKind::ALL.iter().map(|k| k.name()).collect();
                Error::invalid(format!("unknown texture `{s}` (known: {})", names.join(", ")))
            })
    }
}

/// A texture kind plus its rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub kind: TextureKind,
    /// Pattern period in pixels.
    pub period: f32,
    /// Pattern orientation in degrees; 0 means the pattern varies along x.
    pub orientation: f32,
    pub foreground: f32,
    pub background: f32,
    /// Maximum random phase offset in pixels along each pattern axis.
    pub jitter: f32,
}

impl Texture {
    pub fn new(kind: TextureKind, period: f32) -> Self {
        Texture {
            kind,
            period,
            orientation: 0.0,
            foreground: 1.0,
            background: 0.0,
            jitter: 0.0,
        }
    }

    /// Random parameters typical for `kind`: random period, orientation,
    /// phase and contrast.
    pub fn sample(kind: TextureKind, r: &mut Rng) -> Self {
        let period = match kind {
            TextureKind::Stripes => r.random_range(4.0..8.0),
            TextureKind::Dots => r.random_range(6.0..9.0),
            TextureKind::Checker => r.random_range(8.0..12.0),
            TextureKind::Honeycomb => r.random_range(8.0..11.0),
            TextureKind::Zigzag => r.random_range(6.0..9.0),
            TextureKind::PlainNoise => 1.0,
        };
        let (foreground, background) = match kind {
            TextureKind::PlainNoise => (r.random_range(0.9..1.0), r.random_range(0.0..0.1)),
            _ => (r.random_range(0.7..1.0), r.random_range(0.0..0.3)),
        };
        Texture {
            kind,
            period,
            orientation: r.random_range(0.0..180.0),
            foreground,
            background,
            jitter: period,
        }
    }

    /// Low-contrast noise used behind class shapes.
    pub fn background_noise(r: &mut Rng) -> Self {
        let level: f32 = r.random_range(0.3..0.7);
        Texture {
            kind: TextureKind::PlainNoise,
            period: 1.0,
            orientation: 0.0,
            foreground: level + 0.1,
            background: level - 0.1,
            jitter: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.period.is_finite()
            && self.period >= 1.0
            && self.orientation.is_finite()
            && (0.0..=1.0).contains(&self.foreground)
            && (0.0..=1.0).contains(&self.background)
            && self.jitter >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad texture parameters {self:?}")))
        }
    }
}

/// Distance from `(x, y)` to the nearest and second-nearest points of a
/// hexagonal lattice with spacing `p`.
fn hex_distances(x: f32, y: f32, p: f32) -> (f32, f32) {
    let row_h = p * 3f32.sqrt() / 2.0;
    let j0 = (y / row_h).floor() as i64;
    let (mut d1, mut d2) = (f32::INFINITY, f32::INFINITY);
    for j in j0 - 1..=j0 + 2 {
        let shift = if j.rem_euclid(2) == 1 { p / 2.0 } else { 0.0 };
        let i0 = ((x - shift) / p).floor() as i64;
        for i in i0 - 1..=i0 + 2 {
            let (cx, cy) = (i as f32 * p + shift, j as f32 * row_h);
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            if d < d1 {
                d2 = d1;
                d1 = d;
            } else if d < d2 {
                d2 = d;
            }
        }
    }
    (d1, d2)
}

/// Pattern membership at rotated coordinates `(u, v)`.
fn pattern_on(kind: TextureKind, u: f32, v: f32, p: f32) -> bool {
    match kind {
        TextureKind::Stripes => u.rem_euclid(p) < p / 2.0,
        TextureKind::Dots => {
            let du = u.rem_euclid(p) - p / 2.0;
            let dv = v.rem_euclid(p) - p / 2.0;
            du * du + dv * dv <= (0.3 * p).powi(2)
        }
        TextureKind::Checker => {
            let cell = p / 2.0;
            ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2) == 0
        }
        TextureKind::Honeycomb => {
            let (d1, d2) = hex_distances(u, v, p);
            d2 - d1 >= 0.18 * p
        }
        TextureKind::Zigzag => {
            // lines swing a full period along a triangle wave in v
            let t = (v / p).rem_euclid(1.0);
            let tri = 1.0 - (2.0 * t - 1.0).abs();
            (u + tri * p).rem_euclid(p) < 0.4 * p
        }
        TextureKind::PlainNoise => unreachable!("noise has no geometric pattern"),
    }
}

/// Renders a full-frame `[3, h, w]` texture; a pure function of its inputs.
pub fn render_texture(texture: &Texture, size: (usize, usize), seed: u64) -> Result<Tensor> {
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!("texture size {h}x{w} below 8x8")));
    }
    texture.validate()?;
    let mut r = rng::rng(seed);
    let (lo, hi) = (texture.background, texture.foreground);
    if texture.kind == TextureKind::PlainNoise {
        return Ok(Tensor::from_fn(&[3, h, w], |_| lo + (hi - lo) * r.random::<f32>()));
    }
    let (pu, pv) = if texture.jitter > 0.0 {
        (r.random_range(0.0..texture.jitter), r.random_range(0.0..texture.jitter))
    } else {
        (0.0, 0.0)
    };
    let theta = texture.orientation.to_radians();
    let (s, c) = theta.sin_cos();
    let mut plane = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f32, y as f32);
            let u = xf * c + yf * s + pu;
            let v = -xf * s + yf * c + pv;
            plane[y * w + x] = if pattern_on(texture.kind, u, v, texture.period) { hi } else { lo };
        }
    }
    Ok(Tensor::from_fn(&[3, h, w], |i| plane[i % (h * w)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stripes_alternate_in_blocks_of_two() {
        let t = Texture::new(TextureKind::Stripes, 4.0);
        let img = render_texture(&t, (8, 12), 0).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..12 {
                    let want = if x % 4 < 2 { 1.0 } else { 0.0 };
                    assert_eq!(img.data()[c * 96 + y * 12 + x], want);
                }
            }
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let t = Texture::new(TextureKind::PlainNoise, 1.0);
        assert_eq!(render_texture(&t, (16, 16), 7).unwrap(), render_texture(&t, (16, 16), 7).unwrap());
        assert_ne!(render_texture(&t, (16, 16), 7).unwrap(), render_texture(&t, (16, 16), 8).unwrap());
    }

    /// Counts 4-connected foreground components by flood fill.
    fn components(mask: &[bool], h: usize, w: usize) -> usize {
        let mut seen = vec![false; mask.len()];
        let mut count = 0;
        for start in 0..mask.len() {
            if !mask[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let mut nb = Vec::new();
                if y > 0 {
                    nb.push(i - w);
                }
                if y + 1 < h {
                    nb.push(i + w);
                }
                if x > 0 {
                    nb.push(i - 1);
                }
                if x + 1 < w {
                    nb.push(i + 1);
                }
                for j in nb {
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn dots_on_regular_grid() {
        let t = Texture::new(TextureKind::Dots, 8.0);
        let img = render_texture(&t, (32, 32), 0).unwrap();
        let mask: Vec<bool> = img.data()[..1024].iter().map(|&v| v > 0.5).collect();
        assert_eq!(components(&mask, 32, 32), 16);
        for gy in 0..4 {
            for gx in 0..4 {
                assert!(mask[(4 + 8 * gy) * 32 + 4 + 8 * gx]);
            }
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!("wavy".parse::<TextureKind>().is_err());
        assert_eq!("plain-noise".parse::<TextureKind>().unwrap(), TextureKind::PlainNoise);
    }

    #[test]
    fn every_kind_in_unit_range() {
        let mut r = rng::rng(3);
        for kind in TextureKind::ALL {
            let t = Texture::sample(kind, &mut r);
            let img = render_texture(&t, (32, 32), 1).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind}");
        }
    }

    #[test]
    fn too_small_rejected() {
        assert!(render_texture(&Texture::new(TextureKind::Checker, 4.0), (4, 32), 0).is_err());
    }
}
