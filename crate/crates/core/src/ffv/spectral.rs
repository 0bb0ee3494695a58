//! Oriented-energy spectral signature of an image.

use serde::{Deserialize, Serialize};

use super::fft::{check_size, half_width, rfft2};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-width of the orientation window, in degrees.
pub const WINDOW_DEG: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSignature {
    /// Energy within ±15° of the dominant orientation over total energy.
    pub ratio: f64,
    /// Angle of the dominant frequency vector in degrees, in `[0, 180)`;
    /// 0° means intensity varies along x (vertical stripes).
    pub angle: f64,
}

fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// Spectral signature of the channel-mean of a `[C, H, W]` image, DC removed.
pub fn signature(image: &Tensor) -> Result<SpectralSignature> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("expected a [C, H, W] image, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    check_size(h, w)?;
    let plane = h * w;
    let gray: Vec<f64> = (0..plane)
        .map(|i| (0..c).map(|ch| image.data()[ch * plane + i] as f64).sum::<f64>() / c as f64)
        .collect();
    let mean = gray.iter().sum::<f64>() / plane as f64;
    let centered: Vec<f64> = gray.iter().map(|v| v - mean).collect();
    let half = rfft2(&centered, h, w);
    let hw = half_width(w);
    let mut bins = Vec::with_capacity(h * hw);
    for y in 0..h {
        for x in 0..hw {
            let fy = if y <= h / 2 { y as f64 } else { y as f64 - h as f64 } / h as f64;
            let fx = x as f64 / w as f64;
            if fy == 0.0 && fx == 0.0 {
                continue;
            }
            let e = half[y * hw + x].norm_sqr();
            if e > 0.0 {
                bins.push((fy.atan2(fx).to_degrees().rem_euclid(180.0), e));
            }
        }
    }
    let total: f64 = bins.iter().map(|b| b.1).sum();
    if total < 1e-12 {
        return Ok(SpectralSignature { ratio: 0.0, angle: 0.0 });
    }
    let (mut best, mut best_angle) = (-1.0, 0.0);
    for step in 0..360 {
        let phi = step as f64 * 0.5;
        let e: f64 = bins
            .iter()
            .filter(|(a, _)| angular_distance(*a, phi) <= WINDOW_DEG)
            .map(|b| b.1)
            .sum();
        if e > best {
            best = e;
            best_angle = phi;
        }
    }
    Ok(SpectralSignature {
        ratio: best / total,
        angle: best_angle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render_texture, Texture, TextureKind};

    #[test]
    fn vertical_stripes_are_oriented_along_x() {
        let img = render_texture(&Texture::new(TextureKind::Stripes, 8.0), (32, 32), 0).unwrap();
        let s = signature(&img).unwrap();
        assert!(s.ratio > 0.95, "{s:?}");
        assert!(angular_distance(s.angle, 0.0) <= WINDOW_DEG, "{s:?}");
    }

    #[test]
    fn stripes_beat_dots_and_noise() {
        let stripes = signature(&render_texture(&Texture::new(TextureKind::Stripes, 8.0), (32, 32), 0).unwrap()).unwrap();
        let dots = signature(&render_texture(&Texture::new(TextureKind::Dots, 8.0), (32, 32), 0).unwrap()).unwrap();
        let noise = signature(&render_texture(&Texture::new(TextureKind::PlainNoise, 1.0), (32, 32), 0).unwrap()).unwrap();
        assert!(stripes.ratio > dots.ratio && dots.ratio > noise.ratio, "{stripes:?} {dots:?} {noise:?}");
        assert!(noise.ratio < 0.35);
    }

    #[test]
    fn flat_image_has_zero_ratio() {
        let s = signature(&Tensor::full(&[3, 8, 8], 0.4)).unwrap();
        assert_eq!(s.ratio, 0.0);
    }
}
