//! Minimal dense-network engine: forward evaluation, reverse-mode gradients,
//! Adam updates and finite-difference verification.
//!
//! Parameters of an [`MlpNetwork`] are laid out, wherever they appear flat,
//! layer by layer: the row-major `out x in` weight matrix followed by the bias.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SplitRng;

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if v > 0.0 {
                    v
                } else {
                    LEAKY_RELU_SLOPE * v
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation `v` and output `y`.
    #[inline]
    pub fn derivative(self, v: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if v > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    /// Whether the activation has a kink at zero.
    pub fn is_piecewise(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "leaky_relu" => Some(Activation::LeakyRelu),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out x in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation, dropout_rate: f64) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Dimension {
                context: "DenseLayer bias",
                expected: weights.rows(),
                got: bias.len(),
            });
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidConfig(alloc::format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        Ok(Self {
            weights,
            bias,
            activation,
            dropout_rate,
        })
    }

    /// He-style uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    pub fn he_uniform(input: usize, output: usize, activation: Activation, dropout_rate: f64, rng: &mut SplitRng) -> Result<Self> {
        if input == 0 || output == 0 {
            return Err(Error::InvalidConfig("layer widths must be nonzero".into()));
        }
        let limit = libm::sqrt(6.0 / input as f64);
        let data = (0..input * output).map(|_| rng.uniform_range(-limit, limit)).collect();
        Self::new(Matrix::from_vec(output, input, data)?, vec![0.0; output], activation, dropout_rate)
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(row, b)| b + crate::linalg::dot(row, x))
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct MlpNetwork {
    layers: Vec<DenseLayer>,
    mode: Mode,
    grads: Vec<f64>,
    cache: Option<ForwardCache>,
}

impl PartialEq for MlpNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl MlpNetwork {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::LayerDimension {
                    layer: k + 1,
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        let n = layers.iter().map(DenseLayer::param_count).sum();
        Ok(Self {
            layers,
            mode: Mode::Eval,
            grads: vec![0.0; n],
            cache: None,
        })
    }

    /// Builds `sizes.len() - 1` layers. `activations[k]` and `dropout[k]`
    /// belong to layer `k`.
    pub fn he_init(sizes: &[usize], activations: &[Activation], dropout: &[f64], rng: &mut SplitRng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidConfig("need at least input and output width".into()));
        }
        let n = sizes.len() - 1;
        if activations.len() != n || dropout.len() != n {
            return Err(Error::Dimension {
                context: "MlpNetwork::he_init per-layer settings",
                expected: n,
                got: activations.len().min(dropout.len()),
            });
        }
        let layers = (0..n)
            .map(|k| DenseLayer::he_uniform(sizes[k], sizes[k + 1], activations[k], dropout[k], rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.cache = None;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(DenseLayer::output_dim));
        s
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.cache = None;
    }

    /// Copy of the network with every dropout rate set to zero.
    pub fn without_dropout(&self) -> Self {
        let mut net = self.clone();
        for l in &mut net.layers {
            l.dropout_rate = 0.0;
        }
        net
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::LayerDimension {
                layer: 0,
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Evaluation-mode forward pass. Never mutates and never drops units.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            let act = layer.activation;
            h = layer.pre_activation(&h).into_iter().map(|v| act.apply(v)).collect();
        }
        Ok(h)
    }

    /// Evaluation-mode forward pass over the rows of `x`.
    pub fn predict_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::LayerDimension {
                layer: 0,
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = Matrix::matmul(&h, false, &layer.weights, true);
            let act = layer.activation;
            let width = z.cols();
            for (i, v) in z.as_mut_slice().iter_mut().enumerate() {
                *v = act.apply(*v + layer.bias[i % width]);
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass honoring the current mode. In `Train` mode dropout masks
    /// are drawn from `rng` and the intermediates needed by
    /// [`MlpNetwork::backward`] are recorded.
    pub fn forward(&mut self, x: &[f64], rng: &mut SplitRng) -> Result<Vec<f64>> {
        if self.mode == Mode::Eval {
            return self.predict(x);
        }
        self.check_input(x)?;
        let mut cache = ForwardCache::default();
        let mut h = x.to_vec();
        for layer in &self.layers {
            let pre = layer.pre_activation(&h);
            let mut post: Vec<f64> = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            let mask = if layer.dropout_rate > 0.0 {
                let keep = 1.0 - layer.dropout_rate;
                let m: Vec<f64> = (0..post.len()).map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 }).collect();
                let out = post.iter().zip(&m).map(|(p, k)| p * k).collect();
                cache.post.push(post);
                post = out;
                Some(m)
            } else {
                cache.post.push(post.clone());
                None
            };
            cache.inputs.push(h);
            cache.pre.push(pre);
            cache.masks.push(mask);
            h = post;
        }
        self.cache = Some(cache);
        Ok(h)
    }

    /// Backpropagates `upstream = dL/d(output)` through the last training
    /// forward pass, accumulating parameter gradients. Returns `dL/d(input)`.
    pub fn backward(&mut self, upstream: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache.take().ok_or(Error::BackwardWithoutForward)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                context: "MlpNetwork::backward upstream",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let offsets = self.param_offsets();
        let mut delta = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if let Some(mask) = &cache.masks[k] {
                for (d, m) in delta.iter_mut().zip(mask) {
                    *d *= m;
                }
            }
            for (j, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(cache.pre[k][j], cache.post[k][j]);
            }
            let input = &cache.inputs[k];
            let base = offsets[k];
            let n_in = layer.input_dim();
            for (o, &d) in delta.iter().enumerate() {
                let row = &mut self.grads[base + o * n_in..base + (o + 1) * n_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let bias_base = base + layer.output_dim() * n_in;
            for (o, &d) in delta.iter().enumerate() {
                self.grads[bias_base + o] += d;
            }
            let mut next = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                for (n, w) in next.iter_mut().zip(layer.weights.row(o)) {
                    *n += d * w;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Vector-Jacobian product `upstream^T * d(output)/d(input)` at `x`,
    /// evaluated without dropout and without touching gradient buffers.
    pub fn input_vjp(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut posts = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let pre = layer.pre_activation(&h);
            let post: Vec<f64> = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(h);
            h = post.clone();
            pres.push(pre);
            posts.push(post);
        }
        let mut delta = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            for (j, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(pres[k][j], posts[k][j]);
            }
            let mut next = vec![0.0; layer.input_dim()];
            for (o, &d) in delta.iter().enumerate() {
                for (n, w) in next.iter_mut().zip(layer.weights.row(o)) {
                    *n += d * w;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Sign pattern of every kinked pre-activation at `x`; two inputs with the
    /// same pattern lie in the same linear region of the piecewise parts.
    pub fn activation_pattern(&self, x: &[f64]) -> Result<Vec<bool>> {
        self.check_input(x)?;
        let mut pattern = Vec::new();
        let mut h = x.to_vec();
        for layer in &self.layers {
            let pre = layer.pre_activation(&h);
            if layer.activation.is_piecewise() {
                pattern.extend(pre.iter().map(|&v| v > 0.0));
            }
            h = pre.into_iter().map(|v| layer.activation.apply(v)).collect();
        }
        Ok(pattern)
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.param_count();
        }
        offsets
    }

    pub fn param_count(&self) -> usize {
        self.grads.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension {
                context: "MlpNetwork::set_params_flat",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut rest = params;
        for l in &mut self.layers {
            let nw = l.weights.rows() * l.weights.cols();
            l.weights.as_mut_slice().copy_from_slice(&rest[..nw]);
            rest = &rest[nw..];
            let nb = l.bias.len();
            l.bias.copy_from_slice(&rest[..nb]);
            rest = &rest[nb..];
        }
        self.cache = None;
        Ok(())
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Applies one Adam update with the accumulated gradients.
    pub fn apply_adam(&mut self, state: &mut AdamState) -> Result<()> {
        let mut params = self.params_flat();
        adam_step(&mut params, &self.grads, state)?;
        self.set_params_flat(&params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }
}

/// Bias-corrected Adam with coupled L2 weight decay (`g + wd * theta`).
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Dimension {
            context: "adam_step",
            expected: params.len(),
            got: grads.len().min(state.first_moment.len()),
        });
    }
    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
    for i in 0..params.len() {
        let g = grads[i] + c.weight_decay * params[i];
        let m = c.beta1 * state.first_moment[i] + (1.0 - c.beta1) * g;
        let v = c.beta2 * state.second_moment[i] + (1.0 - c.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] -= c.lr * m_hat / (libm::sqrt(v_hat) + c.eps);
    }
    Ok(())
}

/// Objective value plus a fingerprint of every branch decision (kink side)
/// taken while evaluating it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub signature: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink; excluded from the error.
    pub non_differentiable: Vec<usize>,
    pub pass: bool,
}

/// Gradient magnitudes below this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `objective` at
/// `params`, one coordinate at a time.
pub fn finite_diff_check<F>(params: &[f64], analytic: &[f64], mut objective: F, h: f64, tol: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> Probe,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let base = objective(params).signature;
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: None,
        checked: 0,
        non_differentiable: Vec::new(),
        pass: true,
    };
    for i in 0..params.len() {
        theta[i] = params[i] + h;
        let plus = objective(&theta);
        theta[i] = params[i] - h;
        let minus = objective(&theta);
        theta[i] = params[i];
        if plus.signature != base || minus.signature != base {
            report.non_differentiable.push(i);
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * h);
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs()).max(GRAD_CHECK_FLOOR);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst_index.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst_index = Some(i);
        }
    }
    report.pass = report.max_rel_err < tol && report.max_rel_err.is_finite();
    report
}

/// Hash of a boolean pattern, used as a [`Probe`] signature.
pub fn pattern_signature(bits: impl IntoIterator<Item = bool>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bits {
        h ^= b as u64 + 1;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Finite-difference check of a network's parameter gradients for the loss
/// `loss(output) -> (value, dvalue/doutput)` at input `x`. Dropout is
/// disabled for the check.
pub fn finite_diff_check_network<L>(net: &MlpNetwork, x: &[f64], loss: L, h: f64, tol: f64) -> Result<GradCheckReport>
where
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut work = net.without_dropout();
    work.set_mode(Mode::Train);
    work.zero_grad();
    let mut rng = SplitRng::new(0);
    let out = work.forward(x, &mut rng)?;
    let (_, upstream) = loss(&out);
    work.backward(&upstream)?;
    let analytic = work.grads().to_vec();
    let params = work.params_flat();
    let mut probe_net = work.clone();
    probe_net.set_mode(Mode::Eval);
    let report = finite_diff_check(
        &params,
        &analytic,
        |theta| {
            probe_net.set_params_flat(theta).expect("parameter length fixed");
            let y = probe_net.predict(x).expect("input width fixed");
            let pattern = probe_net.activation_pattern(x).expect("input width fixed");
            Probe {
                value: loss(&y).0,
                signature: pattern_signature(pattern),
            }
        },
        h,
        tol,
    );
    Ok(report)
}
