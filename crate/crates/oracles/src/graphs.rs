//! Randomly composed tapes for gradient checking.

use cpak_core::model::{Architecture, TrainedModel};
use cpak_core::tape::{finite_difference_check, Bindings, NodeId, Op, Tape};
use cpak_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const H: f64 = 1e-5;

/// Minimum distance to a relu or max-pool kink.
pub const MARGIN: f64 = 1e-3;

/// A randomly composed scalar-valued tape with its bound inputs.
pub struct RandomGraph {
    pub tape: Tape,
    pub root: NodeId,
    pub inputs: Vec<(String, Tensor)>,
    pub description: String,
}

impl RandomGraph {
    pub fn bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        for (name, t) in &self.inputs {
            b.insert(name, t);
        }
        b
    }

    /// Worst finite-difference error over every input.
    pub fn max_error(&self, h: f64) -> f64 {
        let binds = self.bindings();
        self.inputs
            .iter()
            .map(|(name, _)| finite_difference_check(&self.tape, &binds, self.root, name, h).unwrap())
            .fold(0.0, f64::max)
    }

    /// Smallest distance to a relu or max-pool kink under the bound inputs.
    pub fn kink_margin(&self) -> f64 {
        let vals = self.tape.forward(&self.bindings()).unwrap();
        let mut margin = f64::INFINITY;
        for (_, op) in self.tape.ops() {
            match op {
                Op::Relu(a) => {
                    for &v in vals.get(*a).data() {
                        margin = margin.min(v.abs() as f64);
                    }
                }
                Op::MaxPool2x2(a) => {
                    let x = vals.get(*a);
                    let s = x.shape();
                    let (h, w) = (s[2], s[3]);
                    for plane in x.data().chunks(h * w) {
                        for i in 0..h / 2 {
                            for j in 0..w / 2 {
                                let mut win = [
                                    plane[2 * i * w + 2 * j],
                                    plane[2 * i * w + 2 * j + 1],
                                    plane[(2 * i + 1) * w + 2 * j],
                                    plane[(2 * i + 1) * w + 2 * j + 1],
                                ];
                                win.sort_by(|a, b| b.total_cmp(a));
                                margin = margin.min((win[0] - win[1]) as f64);
                            }
                        }
                    }
                }
                Op::L2Norm(a) => margin = margin.min(vals.get(*a).l2_norm()),
                _ => {}
            }
        }
        margin
    }
}

struct Builder {
    rng: ChaCha8Rng,
    tape: Tape,
    inputs: Vec<(String, Tensor)>,
    ops: Vec<&'static str>,
}

impl Builder {
    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    fn input(&mut self, shape: &[usize]) -> NodeId {
        let name = format!("in{}", self.inputs.len());
        let t = self.tensor(shape);
        let id = self.tape.input(&name, shape);
        self.inputs.push((name, t));
        id
    }

    /// A positive scalar input, kept away from zero for `div`.
    fn scalar_input(&mut self) -> NodeId {
        let name = format!("in{}", self.inputs.len());
        let v = self.rng.random_range(0.5f32..2.0);
        let id = self.tape.input(&name, &[1]);
        self.inputs.push((name, Tensor::from_vec(vec![v])));
        id
    }

    fn elementwise(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let n = self.rng.random_range(1..=3);
        let mut x = x;
        for _ in 0..n {
            x = match self.rng.random_range(0..7) {
                0 => {
                    let b = self.input(shape);
                    self.ops.push("add");
                    self.tape.add(x, b)
                }
                1 => {
                    let b = self.input(shape);
                    self.ops.push("sub");
                    self.tape.sub(x, b)
                }
                2 => {
                    let b = self.input(shape);
                    self.ops.push("hadamard");
                    self.tape.hadamard(x, b)
                }
                3 => {
                    let s = self.scalar_input();
                    self.ops.push("mul");
                    self.tape.mul(x, s)
                }
                4 => {
                    let s = self.scalar_input();
                    self.ops.push("div");
                    self.tape.div(x, s)
                }
                5 => {
                    let f = self.rng.random_range(-2.0f32..2.0);
                    self.ops.push("scale");
                    self.tape.scale(x, f)
                }
                _ => {
                    self.ops.push("relu");
                    self.tape.relu(x)
                }
            };
        }
        x
    }

    fn reduce(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let two_d = shape.len() == 2 && shape[1] >= 2;
        match self.rng.random_range(0..if two_d { 5 } else { 4 }) {
            0 => {
                self.ops.push("sum");
                self.tape.sum(x)
            }
            1 => {
                self.ops.push("mean");
                self.tape.mean(x)
            }
            2 => {
                self.ops.push("l2_norm");
                self.tape.l2_norm(x)
            }
            3 => {
                let c = self.tensor(shape);
                let c = self.tape.constant(c);
                self.ops.push("dot");
                self.tape.dot(x, c)
            }
            _ => {
                let d = shape[1];
                let targets = Tensor::from_fn(shape, |i| if i % d == (i / d * 7 + 3) % d { 1.0 } else { 0.0 });
                let t = self.tape.constant(targets);
                self.ops.push("softmax_cross_entropy");
                self.tape.softmax_cross_entropy(x, t)
            }
        }
    }
}

/// Builds graph number `seed` of the randomized gradient suite.
pub fn random_graph(seed: u64) -> RandomGraph {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        tape: Tape::new(),
        inputs: Vec::new(),
        ops: Vec::new(),
    };
    let (x, shape) = match b.rng.random_range(0..3) {
        0 => {
            // convolution block
            let n = b.rng.random_range(1..=2);
            let c = b.rng.random_range(1..=3);
            let hw = [4, 6, 8][b.rng.random_range(0..3)];
            let o = b.rng.random_range(1..=3);
            let k = [1, 3][b.rng.random_range(0..2)];
            let stride = b.rng.random_range(1..=2);
            let padding = if k == 3 { b.rng.random_range(0..=1) } else { 0 };
            let x = b.input(&[n, c, hw, hw]);
            let w = b.input(&[o, c, k, k]);
            let bias = if b.rng.random_bool(0.5) { Some(b.input(&[o])) } else { None };
            b.ops.push("conv2d");
            let mut y = b.tape.conv2d(x, w, bias, stride, padding);
            let mut side = (hw + 2 * padding - k) / stride + 1;
            if b.rng.random_bool(0.6) {
                b.ops.push("relu");
                y = b.tape.relu(y);
            }
            if side % 2 == 0 && b.rng.random_bool(0.6) {
                b.ops.push("maxpool2x2");
                y = b.tape.maxpool2x2(y);
                side /= 2;
            }
            let flat = o * side * side;
            b.ops.push("reshape");
            y = b.tape.reshape(y, &[n, flat]);
            if b.rng.random_bool(0.5) {
                let d = b.rng.random_range(2..=4);
                let w2 = b.input(&[flat, d]);
                b.ops.push("matmul");
                y = b.tape.matmul(y, w2);
                (y, vec![n, d])
            } else {
                (y, vec![n, flat])
            }
        }
        1 => {
            // dense layer
            let n = b.rng.random_range(1..=3);
            let d = b.rng.random_range(2..=5);
            let k = b.rng.random_range(2..=4);
            let x = b.input(&[n, d]);
            let w = b.input(&[d, k]);
            b.ops.push("matmul");
            let mut y = b.tape.matmul(x, w);
            if b.rng.random_bool(0.5) {
                let bias = b.input(&[k]);
                b.ops.push("add");
                y = b.tape.add(y, bias);
            }
            let y = b.elementwise(y, &[n, k]);
            (y, vec![n, k])
        }
        _ => {
            let m = b.rng.random_range(2..=8);
            let x = b.input(&[m]);
            let y = b.elementwise(x, &[m]);
            (y, vec![m])
        }
    };
    let root = b.reduce(x, &shape);
    RandomGraph {
        description: b.ops.join(" -> "),
        tape: b.tape,
        root,
        inputs: b.inputs,
    }
}

/// Graph `seed` with inputs resampled until every kink is at least
/// `margin` away, so central differences do not straddle one.
pub fn smooth_random_graph(seed: u64, margin: f64) -> RandomGraph {
    for attempt in 0.. {
        let g = random_graph(seed.wrapping_mul(1000).wrapping_add(attempt));
        if g.kink_margin() >= margin {
            return g;
        }
    }
    unreachable!()
}

/// Worst relative error of the class-2 logit gradient with respect to every
/// input pixel of a freshly initialized model.
pub fn model_input_gradient_error(arch: Architecture, size: usize, seed: u64) -> f64 {
    let m = TrainedModel::build(arch.spec(&[3, size, size], 6), seed).unwrap();
    let mut g = m.graph(1, m.spec.layers.len() - 1);
    let logits = *g.layers.last().unwrap();
    let mask = g.tape.constant(Tensor::from_fn(&[1, 6], |i| if i == 2 { 1.0 } else { 0.0 }));
    let picked = g.tape.hadamard(logits, mask);
    let root = g.tape.sum(picked);
    let x = Tensor::from_fn(&[1, 3, size, size], |i| ((i * 7919 % 1000) as f32) / 1000.0);
    let mut binds = m.weight_bindings();
    binds.insert("x", &x);
    finite_difference_check(&g.tape, &binds, root, "x", H).unwrap()
}

