//! Naive `f64` interpreter for tapes.
//!
//! Shares nothing with the optimized `f32` kernels: direct loops for
//! convolution and matrix products, no im2col, no BLAS. It exists as an
//! independent evaluation route for finite-difference checks, where `f32`
//! round-off would swamp the central differences.

use crate::error::{Error, Result};
use crate::tape::{Bindings, NodeId, Op, Tape};

/// A dense `f64` array with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Array64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array64 {
    fn scalar(v: f64) -> Self {
        Array64 {
            shape: vec![1],
            data: vec![v],
        }
    }
}

/// Evaluates `tape` in `f64`, with `overrides` replacing bound inputs by name.
pub fn forward_f64(
    tape: &Tape,
    inputs: &Bindings<'_>,
    overrides: &[(&str, &Array64)],
) -> Result<Vec<Array64>> {
    let mut vals: Vec<Array64> = Vec::with_capacity(tape.len());
    for i in 0..tape.len() {
        let id = NodeId(i);
        let v = eval(tape, id, &vals, inputs, overrides)?;
        vals.push(v);
    }
    Ok(vals)
}

fn eval(
    tape: &Tape,
    id: NodeId,
    vals: &[Array64],
    inputs: &Bindings<'_>,
    overrides: &[(&str, &Array64)],
) -> Result<Array64> {
    let v = |n: &NodeId| &vals[n.0];
    let bad = |expected: &str, actual: &[usize]| Error::ShapeMismatch {
        node: tape.describe(id),
        expected: expected.to_string(),
        actual: actual.to_vec(),
    };
    let elementwise = |a: &Array64, f: &dyn Fn(f64) -> f64| Array64 {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    };
    Ok(match tape.op(id) {
        Op::Input { name, shape } => {
            if let Some((_, a)) = overrides.iter().find(|(n, _)| n == name) {
                (*a).clone()
            } else {
                let t = inputs.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(bad(&format!("{shape:?}"), t.shape()));
                }
                Array64 {
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|&x| x as f64).collect(),
                }
            }
        }
        Op::Const(t) => Array64 {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| x as f64).collect(),
        },
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (a, b) = (v(a), v(b));
            let sign = if matches!(tape.op(id), Op::Add(..)) { 1.0 } else { -1.0 };
            let bw = b.data.len();
            if a.data.len() % bw != 0 {
                return Err(bad("broadcastable operands", &b.shape));
            }
            Array64 {
                shape: a.shape.clone(),
                data: a.data.iter().enumerate().map(|(i, x)| x + sign * b.data[i % bw]).collect(),
            }
        }
        Op::Mul(a, s) => {
            let s = v(s).data[0];
            elementwise(v(a), &|x| x * s)
        }
        Op::Div(a, s) => {
            let s = v(s).data[0];
            elementwise(v(a), &|x| x / s)
        }
        Op::Hadamard(a, b) => {
            let (a, b) = (v(a), v(b));
            Array64 {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
            }
        }
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = (0..k).map(|p| a.data[i * k + p] * b.data[p * n + j]).sum();
                }
            }
            Array64 {
                shape: vec![m, n],
                data: out,
            }
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let (x, k) = (v(input), v(kernel));
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (o, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
            let (s, p) = (*stride, *padding as isize);
            let oh = (h + 2 * *padding - kh) / s + 1;
            let ow = (w + 2 * *padding - kw) / s + 1;
            let mut out = vec![0.0; n * o * oh * ow];
            for b in 0..n {
                for oc in 0..o {
                    let base = bias.map(|bi| v(&bi).data[oc]).unwrap_or(0.0);
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = base;
                            for ic in 0..c {
                                for di in 0..kh {
                                    for dj in 0..kw {
                                        let yi = (i * s + di) as isize - p;
                                        let xj = (j * s + dj) as isize - p;
                                        if yi < 0 || xj < 0 || yi as usize >= h || xj as usize >= w {
                                            continue;
                                        }
                                        acc += x.data[((b * c + ic) * h + yi as usize) * w + xj as usize]
                                            * k.data[((oc * c + ic) * kh + di) * kw + dj];
                                    }
                                }
                            }
                            out[((b * o + oc) * oh + i) * ow + j] = acc;
                        }
                    }
                }
            }
            Array64 {
                shape: vec![n, o, oh, ow],
                data: out,
            }
        }
        Op::Relu(a) => elementwise(v(a), &|x| x.max(0.0)),
        Op::MaxPool2x2(a) => {
            let a = v(a);
            let (n, c, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
            let mut out = Vec::with_capacity(n * c * h * w / 4);
            for pl in 0..n * c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let at = |di: usize, dj: usize| a.data[(pl * h + 2 * i + di) * w + 2 * j + dj];
                        out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                    }
                }
            }
            Array64 {
                shape: vec![n, c, h / 2, w / 2],
                data: out,
            }
        }
        Op::Mean(a) => {
            let a = v(a);
            Array64::scalar(a.data.iter().sum::<f64>() / a.data.len() as f64)
        }
        Op::Sum(a) => Array64::scalar(v(a).data.iter().sum()),
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let (z, t) = (v(logits), v(targets));
            let (rows, d) = (z.shape[0], z.shape[1]);
            let mut total = 0.0;
            for r in 0..rows {
                let zr = &z.data[r * d..(r + 1) * d];
                let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = zr.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                for (zi, ti) in zr.iter().zip(&t.data[r * d..(r + 1) * d]) {
                    total -= ti * (zi - lse);
                }
            }
            Array64::scalar(total / rows as f64)
        }
        Op::Dot(a, b) => Array64::scalar(v(a).data.iter().zip(&v(b).data).map(|(x, y)| x * y).sum()),
        Op::Reshape(a, shape) => Array64 {
            shape: shape.clone(),
            data: v(a).data.clone(),
        },
        Op::L2Norm(a) => Array64::scalar(v(a).data.iter().map(|x| x * x).sum::<f64>().sqrt()),
        Op::Scale(a, c) => {
            let c = *c as f64;
            elementwise(v(a), &|x| x * c)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn reference_agrees_with_fast_path_on_conv_stack() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2, 2, 6, 6]);
        let k = tape.constant(Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 7 % 11) as f32 - 5.0) / 10.0));
        let b = tape.constant(Tensor::from_vec(vec![0.1, -0.2, 0.05]));
        let c = tape.conv2d(x, k, Some(b), 1, 1);
        let r = tape.relu(c);
        let p = tape.maxpool2x2(r);
        let s = tape.l2_norm(p);
        let xv = Tensor::from_fn(&[2, 2, 6, 6], |i| ((i * 13 % 17) as f32 - 8.0) / 8.0);
        let binds = Bindings::new().bind("x", &xv);
        let fast = tape.forward(&binds).unwrap();
        let slow = forward_f64(&tape, &binds, &[]).unwrap();
        for (i, d) in fast.get(p).data().iter().zip(&slow[p.index()].data) {
            assert!((*i as f64 - d).abs() < 1e-5);
        }
        assert!((fast.get(s).item() as f64 - slow[s.index()].data[0]).abs() < 1e-4);
    }
}
