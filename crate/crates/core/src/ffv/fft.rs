//! Radix-2 complex FFT and the real 2-D transforms built on it.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    pub fn conj(self) -> Self {
        Complex::new(self.re, -self.im)
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    fn mul(self, o: Complex) -> Complex {
        Complex::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    fn scale(self, k: f64) -> Complex {
        Complex::new(self.re * k, self.im * k)
    }
}

pub fn check_size(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() || w < 2 {
        return Err(Error::invalid(format!("FFT needs power-of-two sizes, got {h}x{w}")));
    }
    Ok(())
}

/// Unnormalized in-place FFT; `inverse` flips the twiddle sign.
pub fn fft(buf: &mut [Complex], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length {n}");
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) };
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (s, c) = (ang * k as f64).sin_cos();
                let t = buf[start + k + len / 2].mul(Complex::new(c, s));
                let u = buf[start + k];
                buf[start + k] = Complex::new(u.re + t.re, u.im + t.im);
                buf[start + k + len / 2] = Complex::new(u.re - t.re, u.im - t.im);
            }
        }
        len <<= 1;
    }
}

/// Unnormalized 2-D FFT of a row-major `h × w` grid.
pub fn fft2(buf: &mut [Complex], h: usize, w: usize, inverse: bool) {
    for row in buf.chunks_mut(w) {
        fft(row, inverse);
    }
    let mut col = vec![Complex::ZERO; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        fft(&mut col, inverse);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Width of the half spectrum of a real `h × w` plane.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Half spectrum `h × (w/2 + 1)` of a real plane.
pub fn rfft2(plane: &[f64], h: usize, w: usize) -> Vec<Complex> {
    let mut buf: Vec<Complex> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut buf, h, w, false);
    let hw = half_width(w);
    (0..h * hw).map(|i| buf[(i / hw) * w + i % hw]).collect()
}

/// Real plane from a half spectrum: Hermitian extension, inverse FFT with
/// `1/(hw)` normalization, real part.
pub fn irfft2(half: &[Complex], h: usize, w: usize) -> Vec<f64> {
    let hw = half_width(w);
    let mut buf = vec![Complex::ZERO; h * w];
    for y in 0..h {
        for x in 0..w {
            buf[y * w + x] = if x < hw {
                half[y * hw + x]
            } else {
                half[((h - y) % h) * hw + (w - x)].conj()
            };
        }
    }
    fft2(&mut buf, h, w, true);
    let n = (h * w) as f64;
    buf.iter().map(|c| c.re / n).collect()
}

/// Adjoint of [`irfft2`] viewed as a real-linear map from `(re, im)` pairs
/// of the half spectrum to the plane.
pub fn irfft2_adjoint(grad: &[f64], h: usize, w: usize) -> Vec<Complex> {
    let hw = half_width(w);
    let n = (h * w) as f64;
    let full = {
        let mut buf: Vec<Complex> = grad.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut buf, h, w, false);
        buf
    };
    (0..h * hw)
        .map(|i| {
            let (y, x) = (i / hw, i % hw);
            // interior columns also feed their mirrored conjugate
            let k = if x == 0 || 2 * x == w { 1.0 } else { 2.0 };
            full[y * w + x].scale(k / n)
        })
        .collect()
}
