//! Numeric kernels behind the tape ops.

use rayon::prelude::*;

/// `c = a·b + beta·c` for row-major `c` (m×n), with arbitrary strides on `a`
/// (m×k) and `b` (k×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    assert!(m > 0 && k > 0 && n > 0);
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    assert_eq!(c.len(), m * n, "gemm: output size");
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn out_size(&self) -> usize {
        self.out_channels * self.positions()
    }
}

fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih as usize >= g.height {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.height + ih as usize) * g.width..][..g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *v = if iw < 0 || iw as usize >= g.width {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.height {
                        continue;
                    }
                    let dst = &mut dx[(c * g.height + ih as usize) * g.width..][..g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && (iw as usize) < g.width {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    x: &[f32],
    kernel: &[f32],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let (isz, osz, p, patch) = (g.in_size(), g.out_size(), g.positions(), g.patch());
    let mut out = vec![0.0f32; batch * osz];
    out.par_chunks_mut(osz)
        .zip(x.par_chunks(isz))
        .for_each_init(
            || vec![0.0f32; patch * p],
            |cols, (o, xn)| {
                im2col(g, xn, cols);
                if let Some(b) = bias {
                    for (oc, chunk) in o.chunks_mut(p).enumerate() {
                        chunk.fill(b[oc]);
                    }
                }
                let beta = if bias.is_some() { 1.0 } else { 0.0 };
                gemm(g.out_channels, patch, p, kernel, (patch, 1), cols, (p, 1), o, beta);
            },
        );
    debug_assert_eq!(batch * isz, x.len());
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; each only when requested.
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    need: (bool, bool, bool),
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let (isz, osz, p, patch) = (g.in_size(), g.out_size(), g.positions(), g.patch());
    let (need_x, need_k, need_b) = need;
    let per_sample: Vec<(Option<Vec<f32>>, Option<Vec<f32>>)> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let go = &grad_out[n * osz..(n + 1) * osz];
            let dx = need_x.then(|| {
                let mut dcols = vec![0.0f32; patch * p];
                // kernel^T (patch × O) · go (O × p)
                gemm(patch, g.out_channels, p, kernel, (1, patch), go, (p, 1), &mut dcols, 0.0);
                let mut dx = vec![0.0f32; isz];
                col2im_add(g, &dcols, &mut dx);
                dx
            });
            let dk = need_k.then(|| {
                let mut cols = vec![0.0f32; patch * p];
                im2col(g, &x[n * isz..(n + 1) * isz], &mut cols);
                let mut dk = vec![0.0f32; g.out_channels * patch];
                // go (O × p) · cols^T (p × patch)
                gemm(g.out_channels, p, patch, go, (p, 1), &cols, (1, p), &mut dk, 0.0);
                dk
            });
            (dx, dk)
        })
        .collect();

    let dx = need_x.then(|| {
        let mut dx = Vec::with_capacity(batch * isz);
        for (d, _) in &per_sample {
            dx.extend_from_slice(d.as_ref().expect("requested"));
        }
        dx
    });
    // Summed in sample order so the result does not depend on thread count.
    let dk = need_k.then(|| {
        let mut acc = vec![0.0f32; g.out_channels * patch];
        for (_, d) in &per_sample {
            for (a, v) in acc.iter_mut().zip(d.as_ref().expect("requested")) {
                *a += v;
            }
        }
        acc
    });
    let db = need_b.then(|| {
        let mut acc = vec![0.0f32; g.out_channels];
        for n in 0..batch {
            for (oc, a) in acc.iter_mut().enumerate() {
                let s: f32 = grad_out[n * osz + oc * p..n * osz + (oc + 1) * p].iter().sum();
                *a += s;
            }
        }
        acc
    });
    (dx, dk, db)
}

/// 2×2 max pooling, stride 2, over `[planes, h, w]`.
pub(crate) fn maxpool_forward(planes: usize, h: usize, w: usize, x: &[f32]) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let idx = window_argmax(src, w, i, j);
                dst[i * ow + j] = src[idx];
            }
        }
    }
    out
}

pub(crate) fn maxpool_backward(planes: usize, h: usize, w: usize, x: &[f32], g: &[f32]) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; planes * h * w];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let go = &g[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                dst[window_argmax(src, w, i, j)] += go[i * ow + j];
            }
        }
    }
    dx
}

/// Winner of a 2×2 window; ties go to the first index in row-major order.
#[inline]
fn window_argmax(src: &[f32], w: usize, i: usize, j: usize) -> usize {
    let base = 2 * i * w + 2 * j;
    let mut best = base;
    for idx in [base + 1, base + w, base + w + 1] {
        if src[idx] > src[best] {
            best = idx;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_strides() {
        // a = [[1,2],[3,4]], b = a^T read through strides
        let a = [1.0, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &a, (1, 2), &mut c, 0.0);
        assert_eq!(c, [5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let dx = maxpool_backward(1, 2, 2, &x, &[1.0]);
        assert_eq!(dx, vec![1.0, 0.0, 0.0, 0.0]);
    }
}
