use crate::error::{Error, Result};
use crate::tape::reference::{forward_f64, Array64};
use crate::tape::{Bindings, NodeId, Tape};

/// Compares the tape's analytic gradient of `root` with respect to the input
/// named `input` against central differences with step `h`.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / (max(|analytic|, |numeric|) + 1e-3 · scale)`, where
/// `scale` is the largest numeric magnitude, so coordinates whose true
/// gradient is zero are judged against f32 rounding of the whole gradient
/// instead of dividing by nothing. The central differences are
/// evaluated with the `f64` reference interpreter. Inputs must sit away from
/// relu and max-pool kinks; that is the caller's responsibility.
pub fn finite_difference_check(
    tape: &Tape,
    inputs: &Bindings<'_>,
    root: NodeId,
    input: &str,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let node = tape
        .find_input(input)
        .ok_or_else(|| Error::UnboundInput(input.to_string()))?;
    let x = inputs.get(input).ok_or_else(|| Error::UnboundInput(input.to_string()))?;

    let values = tape.forward(inputs)?;
    let analytic = tape.gradient(&values, root, &[node])?.take(node);

    let base = Array64 {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| v as f64).collect(),
    };
    let mut probe = base.clone();
    let mut numeric = Vec::with_capacity(base.data.len());
    for i in 0..base.data.len() {
        probe.data[i] = base.data[i] + h;
        let up = forward_f64(tape, inputs, &[(input, &probe)])?[root.index()].data[0];
        probe.data[i] = base.data[i] - h;
        let down = forward_f64(tape, inputs, &[(input, &probe)])?[root.index()].data[0];
        probe.data[i] = base.data[i];
        numeric.push((up - down) / (2.0 * h));
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-12;
    let worst = numeric
        .iter()
        .zip(analytic.data())
        .map(|(&n, &a)| {
            let a = a as f64;
            (a - n).abs() / (a.abs().max(n.abs()) + floor)
        })
        .fold(0.0f64, f64::max);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[3]);
        let sq = tape.hadamard(x, x);
        let s = tape.sum(sq);
        let xv = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let err = finite_difference_check(&tape, &Bindings::new().bind("x", &xv), s, "x", 1e-3).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn constant_function() {
        let mut tape = Tape::new();
        let _x = tape.input("x", &[2]);
        let c = tape.constant(Tensor::scalar(3.0));
        let xv = Tensor::from_vec(vec![0.5, -0.5]);
        let binds = Bindings::new().bind("x", &xv);
        let err = finite_difference_check(&tape, &binds, c, "x", 1e-3).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[1]);
        let s = tape.sum(x);
        let xv = Tensor::scalar(1.0);
        assert!(finite_difference_check(&tape, &Bindings::new().bind("x", &xv), s, "x", 0.0).is_err());
    }
}
