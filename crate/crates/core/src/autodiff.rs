//! Reverse-mode automatic differentiation over matrices.
//!
//! Vector-Jacobian products are themselves recorded as tape operations, so a
//! gradient obtained from [`Tape::grad`] is an ordinary [`Var`] that can be
//! differentiated again. The composite losses use this to train through the
//! normalized distance gradient (a Hessian-vector product with respect to
//! the distance network's parameters).
//!
//! Piecewise-linear operations (ReLU, LeakyReLU, `abs`, dropout) are
//! products with a constant mask; their second derivative is zero. Every
//! kink decision is folded into [`Tape::signature`] so finite-difference
//! checks can tell when a perturbation crossed one.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::nn::{Activation, MlpNetwork, LEAKY_RELU_SLOPE};
use crate::rng::SplitRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    AddRow { a: Var, row: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { a: Var, scale: f64 },
    Mask(Var, Rc<Matrix>),
    Sigmoid(Var),
    Sqrt(Var),
    SafeRecip(Var),
    SumAll(Var),
    Broadcast(Var),
    RowSums(Var),
    RepeatCols(Var),
    ColSums(Var),
    RepeatRows(Var),
}

impl Op {
    fn operands(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul { a, b, .. } => [Some(a), Some(b)],
            Op::AddRow { a, row } => [Some(a), Some(row)],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => [Some(a), Some(b)],
            Op::Affine { a, .. }
            | Op::Mask(a, _)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::SafeRecip(a)
            | Op::SumAll(a)
            | Op::Broadcast(a)
            | Op::RowSums(a)
            | Op::RepeatCols(a)
            | Op::ColSums(a)
            | Op::RepeatRows(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    signature: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fingerprint of all kink decisions recorded so far.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    fn fold_mask(&mut self, mask: &Matrix) {
        for &m in mask.as_slice() {
            self.signature ^= m.to_bits();
            self.signature = self.signature.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `op(a) * op(b)`.
    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let v = Matrix::matmul(self.value(a), ta, self.value(b), tb);
        self.push(v, Op::MatMul { a, ta, b, tb })
    }

    /// Adds the `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).as_slice().to_vec();
        let mut v = self.value(a).clone();
        let m = v.cols();
        assert_eq!(m, r.len(), "add_row width");
        for (i, x) in v.as_mut_slice().iter_mut().enumerate() {
            *x += r[i % m];
        }
        self.push(v, Op::AddRow { a, row })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        let v = self.value(a).map(|x| x * scale);
        self.push(v, Op::Affine { a, scale })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Elementwise product with a constant matrix.
    pub fn mask(&mut self, a: Var, mask: Rc<Matrix>) -> Var {
        let v = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(v, Op::Mask(a, mask))
    }

    fn kinked_mask(&mut self, a: Var, neg: f64) -> Var {
        let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { neg });
        self.fold_mask(&mask);
        self.mask(a, Rc::new(mask))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.kinked_mask(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.kinked_mask(a, LEAKY_RELU_SLOPE)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let mask = self.value(a).map(|x| if x >= 0.0 { 1.0 } else { -1.0 });
        self.fold_mask(&mask);
        self.mask(a, Rc::new(mask))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(crate::nn::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(a),
            Activation::LeakyRelu => self.leaky_relu(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Identity => a,
        }
    }

    /// `sqrt(a)`; its derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// `1 / a`, with `1 / 0 := 0`.
    pub fn safe_recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.push(v, Op::SafeRecip(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Matrix::filled(rows, cols, self.scalar(a));
        self.push(v, Op::Broadcast(a))
    }

    /// `n x m -> n x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sums();
        self.push(v, Op::RowSums(a))
    }

    /// `n x 1 -> n x cols` by repetition.
    pub fn repeat_cols(&mut self, a: Var, cols: usize) -> Var {
        let src = self.value(a);
        debug_assert_eq!(src.cols(), 1);
        let mut v = Matrix::zeros(src.rows(), cols);
        for i in 0..src.rows() {
            let x = src.get(i, 0);
            v.row_mut(i).iter_mut().for_each(|e| *e = x);
        }
        self.push(v, Op::RepeatCols(a))
    }

    /// `n x m -> 1 x m`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).col_sums();
        self.push(v, Op::ColSums(a))
    }

    /// `1 x m -> rows x m` by repetition.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Var {
        let src = self.value(a).as_slice().to_vec();
        let mut v = Matrix::zeros(rows, src.len());
        for i in 0..rows {
            v.row_mut(i).copy_from_slice(&src);
        }
        self.push(v, Op::RepeatRows(a))
    }

    /// Euclidean norm of each row, `n x m -> n x 1`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.row_sums(sq);
        self.sqrt(s)
    }

    /// Squared Euclidean norm of each row, `n x m -> n x 1`.
    pub fn row_sq_norms(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.row_sums(sq)
    }

    /// Multiplies each row of `a` by the matching entry of the `n x 1` column `s`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let cols = self.value(a).cols();
        let rep = self.repeat_cols(s, cols);
        self.mul(a, rep)
    }

    /// Gradients of the scalar `output` (or of `<seed, output>` when a seed
    /// is given) with respect to each of `wrt`. The returned variables live
    /// on the tape and can be differentiated again. A `wrt` entry that does
    /// not influence `output` receives a zero matrix.
    pub fn grad_with_seed(&mut self, output: Var, seed: Option<Var>, wrt: &[Var]) -> Vec<Var> {
        let end = output.0 + 1;
        let lowest = wrt.iter().map(|v| v.0).min().unwrap_or(end);
        // Adjoints are only built for nodes that depend on some `wrt` entry.
        let mut live = vec![false; end];
        for w in wrt {
            if w.0 < end {
                live[w.0] = true;
            }
        }
        for i in lowest..end {
            if !live[i] {
                live[i] = self.nodes[i].op.operands().iter().flatten().any(|v| live[v.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; end];
        adj[output.0] = Some(match seed {
            Some(s) => s,
            None => {
                let (r, c) = self.shape(output);
                self.leaf(Matrix::filled(r, c, 1.0))
            }
        });
        for i in (lowest..end).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let node = Var(i);
            match op {
                Op::Leaf => {}
                Op::MatMul { a, ta, b, tb } => {
                    if live[a.0] {
                        let ga = if ta {
                            self.matmul(b, tb, g, true)
                        } else {
                            self.matmul(g, false, b, !tb)
                        };
                        self.accumulate(&mut adj, a, ga);
                    }
                    if live[b.0] {
                        let gb = if tb {
                            self.matmul(g, true, a, ta)
                        } else {
                            self.matmul(a, !ta, g, false)
                        };
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::AddRow { a, row } => {
                    self.accumulate(&mut adj, a, g);
                    if live[row.0] {
                        let gr = self.col_sums(g);
                        self.accumulate(&mut adj, row, gr);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    if live[b.0] {
                        let neg = self.scale(g, -1.0);
                        self.accumulate(&mut adj, b, neg);
                    }
                }
                Op::Mul(a, b) => {
                    if live[a.0] {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if live[b.0] {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Affine { a, scale } => {
                    let ga = self.scale(g, scale);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Mask(a, m) => {
                    let ga = self.mask(g, m);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Sigmoid(a) => {
                    // s' = s - s^2
                    let s2 = self.square(node);
                    let ds = self.sub(node, s2);
                    let ga = self.mul(g, ds);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Sqrt(a) => {
                    let r = self.safe_recip(node);
                    let half = self.scale(r, 0.5);
                    let ga = self.mul(g, half);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SafeRecip(a) => {
                    let y2 = self.square(node);
                    let t = self.mul(g, y2);
                    let ga = self.scale(t, -1.0);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(a);
                    let ga = self.broadcast(g, r, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Broadcast(a) => {
                    let ga = self.sum(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::RowSums(a) => {
                    let c = self.shape(a).1;
                    let ga = self.repeat_cols(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::RepeatCols(a) => {
                    let ga = self.row_sums(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::ColSums(a) => {
                    let r = self.shape(a).0;
                    let ga = self.repeat_rows(g, r);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::RepeatRows(a) => {
                    let ga = self.col_sums(g);
                    self.accumulate(&mut adj, a, ga);
                }
            }
        }
        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(w);
                    self.leaf(Matrix::zeros(r, c))
                }
            })
            .collect()
    }

    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        self.grad_with_seed(output, None, wrt)
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, g: Var) {
        let slot = &mut adj[target.0];
        *slot = Some(match *slot {
            None => g,
            Some(prev) => self.add(prev, g),
        });
    }
}

/// Parameters of one [`MlpNetwork`] registered as tape leaves.
#[derive(Clone, Debug)]
pub struct NetVars {
    layers: Vec<(Var, Var)>,
}

impl NetVars {
    pub fn register(tape: &mut Tape, net: &MlpNetwork) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let w = tape.leaf(l.weights.clone());
                let b = tape.leaf(Matrix::row_vector(&l.bias));
                (w, b)
            })
            .collect();
        Self { layers }
    }

    /// Leaves in the flat parameter order of [`MlpNetwork::params_flat`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Reads the gradient variables for [`NetVars::vars`] into a flat vector.
    pub fn flatten(tape: &Tape, grads: &[Var]) -> Vec<f64> {
        let mut out = Vec::new();
        for &g in grads {
            out.extend_from_slice(tape.value(g).as_slice());
        }
        out
    }

    /// Forward pass of `net` over the rows of `x`. With `dropout` set, each
    /// layer with a positive rate multiplies its output by an inverted
    /// dropout mask drawn from the generator.
    pub fn forward(&self, tape: &mut Tape, net: &MlpNetwork, x: Var, mut dropout: Option<&mut SplitRng>) -> Var {
        let mut h = x;
        for (layer, &(w, b)) in net.layers().iter().zip(&self.layers) {
            let z = tape.matmul(h, false, w, true);
            let z = tape.add_row(z, b);
            h = tape.activation(z, layer.activation);
            if layer.dropout_rate > 0.0 {
                if let Some(rng) = dropout.as_deref_mut() {
                    let keep = 1.0 - layer.dropout_rate;
                    let (r, c) = tape.shape(h);
                    let data = (0..r * c).map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 }).collect();
                    let m = Matrix::from_vec(r, c, data).expect("mask shape");
                    h = tape.mask(h, Rc::new(m));
                }
            }
        }
        h
    }
}
