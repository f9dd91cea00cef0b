//! Bias-free homogeneous feed-forward networks with a scalar output, the
//! logistic loss, and exact backpropagation.
//!
//! A network of depth `K` has matrices `W_1 … W_{K-1}` and a head vector
//! `w_K`: `f(x) = ⟨w_K, h_{K-1}⟩`, `h_k = σ(W_k h_{k-1})`, `h_0 = x`.
//! At a ReLU kink the derivative is taken as 0, the minimum-norm element of
//! the Clarke differential.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    Identity,
    Relu,
    /// `x ↦ max(x, 0)^degree`
    ReluPower { degree: u32 },
}

impl Activation {
    /// Positive-homogeneity degree `H`.
    pub fn degree(self) -> u32 {
        match self {
            Activation::Identity | Activation::Relu => 1,
            Activation::ReluPower { degree } => degree,
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Activation::Identity)
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::ReluPower { degree } => {
                if z > 0.0 {
                    z.powi(degree as i32)
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::ReluPower { degree } => {
                if z > 0.0 {
                    f64::from(degree) * z.powi(degree as i32 - 1)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// Hidden widths `m_1 … m_{K-1}`; depth is `widths.len() + 1`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// When set, the head `w_K` is a constant: it gets no gradient, no decay,
    /// and does not count towards `‖θ‖`.
    #[serde(default)]
    pub fixed_head: bool,
}

impl Architecture {
    pub fn new(input_dim: usize, widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self {
            input_dim,
            widths,
            activation,
            fixed_head: false,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// `f(x) = ⟨u, (W x)_+⟩` with `W` trainable and `u` fixed.
    pub fn shallow(input_dim: usize, width: usize) -> Self {
        Self {
            input_dim,
            widths: vec![width],
            activation: Activation::Relu,
            fixed_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.activation.degree() == 0 {
            return Err(Error::invalid("activation degree must be at least 1"));
        }
        if self.fixed_head && self.widths.is_empty() {
            return Err(Error::invalid("a fixed head needs at least one hidden layer"));
        }
        Ok(())
    }

    /// Number of parameterised layers `K`.
    pub fn depth(&self) -> usize {
        self.widths.len() + 1
    }

    pub fn degree(&self) -> u32 {
        self.activation.degree()
    }

    /// `(rows, cols)` of `W_1 … W_{K-1}`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.input_dim;
        self.widths
            .iter()
            .map(|&m| {
                let s = (m, fan_in);
                fan_in = m;
                s
            })
            .collect()
    }

    pub fn head_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.input_dim)
    }

    /// `H^{K-k}` for layer `k` in `1..=K`.
    pub fn layer_factor(&self, k: usize) -> f64 {
        f64::from(self.degree()).powi((self.depth() - k) as i32)
    }
}

/// `θ = (W_1, …, W_{K-1}, w_K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weights: Vec<Matrix>,
    pub head: Vec<f64>,
}

impl Params {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            weights: arch
                .layer_shapes()
                .into_iter()
                .map(|(r, c)| Matrix::zeros(r, c))
                .collect(),
            head: vec![0.0; arch.head_dim()],
        }
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let shapes = arch.layer_shapes();
        if shapes.len() != self.weights.len() {
            return Err(Error::invalid(format!(
                "architecture has {} matrices, params have {}",
                shapes.len(),
                self.weights.len()
            )));
        }
        for (k, (w, s)) in self.weights.iter().zip(&shapes).enumerate() {
            if w.shape() != *s {
                return Err(Error::invalid(format!(
                    "W_{} is {:?}, architecture expects {:?}",
                    k + 1,
                    w.shape(),
                    s
                )));
            }
        }
        if self.head.len() != arch.head_dim() {
            return Err(Error::invalid(format!(
                "head has dim {}, architecture expects {}",
                self.head.len(),
                arch.head_dim()
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.head.len() == other.head.len()
            && self.weights.len() == other.weights.len()
            && self.weights.iter().zip(&other.weights).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite) && self.head.iter().all(|v| v.is_finite())
    }

    /// Flattened `(vec W_1, …, vec W_{K-1}, w_K)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for w in &self.weights {
            out.extend_from_slice(w.as_slice());
        }
        out.extend_from_slice(&self.head);
        out
    }

    pub fn len(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum::<usize>() + self.head.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mutable views over every block, head last.
    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .map(Matrix::as_mut_slice)
            .chain(std::iter::once(self.head.as_mut_slice()))
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .map(Matrix::as_slice)
            .chain(std::iter::once(self.head.as_slice()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.blocks().map(|b| dot(b, b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &Params) -> f64 {
        self.blocks().zip(other.blocks()).map(|(a, b)| dot(a, b)).sum()
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, c: f64, other: &Params) {
        for (a, b) in self.blocks_mut().zip(other.blocks()) {
            axpy(c, b, a);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn fill_zero(&mut self) {
        for b in self.blocks_mut() {
            b.fill(0.0);
        }
    }

    /// `‖θ‖²` over the trainable parameters of `arch`.
    pub fn trainable_norm_sq(&self, arch: &Architecture) -> f64 {
        let head = if arch.fixed_head { 0.0 } else { dot(&self.head, &self.head) };
        self.weights.iter().map(Matrix::fro_norm_sq).sum::<f64>() + head
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl Dataset {
    /// Checks `n ≥ 1`, equal input dims, `‖x_i‖ ≤ 1` and labels in `{-1, +1}`.
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let d = inputs[0].len();
        for (i, x) in inputs.iter().enumerate() {
            if x.len() != d || d == 0 {
                return Err(Error::invalid(format!("input {i} has dim {}, expected {d}", x.len())));
            }
            if x.iter().any(|v| !v.is_finite()) || norm(x) > 1.0 + 1e-12 {
                return Err(Error::invalid(format!("input {i} is not inside the unit ball")));
            }
        }
        if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::invalid(format!("label {i} is not ±1")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }
}

/// `(ℓ(z), ℓ'(z))` for `ℓ(z) = ln(1 + e^{-z})`.
pub fn logistic_pair(z: f64) -> (f64, f64) {
    if z >= 0.0 {
        let t = (-z).exp();
        (t.ln_1p(), -t / (1.0 + t))
    } else {
        let t = z.exp();
        (-z + t.ln_1p(), -1.0 / (1.0 + t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub output: f64,
    /// `h_0 = x, h_1, …, h_{K-1}`
    pub activations: Vec<Vec<f64>>,
    /// `W_k h_{k-1}` for `k = 1 … K-1`.
    pub pre_activations: Vec<Vec<f64>>,
}

fn check_input(arch: &Architecture, x: &[f64]) -> Result<()> {
    if x.len() != arch.input_dim {
        return Err(Error::invalid(format!(
            "input has dim {}, architecture expects {}",
            x.len(),
            arch.input_dim
        )));
    }
    Ok(())
}

pub(crate) fn forward_unchecked(params: &Params, arch: &Architecture, x: &[f64]) -> ForwardPass {
    let mut activations = Vec::with_capacity(arch.depth());
    let mut pre_activations = Vec::with_capacity(arch.depth() - 1);
    activations.push(x.to_vec());
    for w in &params.weights {
        let z = w.matvec(activations.last().expect("h_0 is always present"));
        activations.push(z.iter().map(|&v| arch.activation.apply(v)).collect());
        pre_activations.push(z);
    }
    let output = dot(&params.head, activations.last().expect("h_0 is always present"));
    ForwardPass {
        output,
        activations,
        pre_activations,
    }
}

pub fn forward(params: &Params, arch: &Architecture, x: &[f64]) -> Result<ForwardPass> {
    params.check(arch)?;
    check_input(arch, x)?;
    Ok(forward_unchecked(params, arch, x))
}

/// Prediction only.
pub fn predict(params: &Params, arch: &Architecture, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    for w in &params.weights {
        h = w.matvec(&h);
        for v in &mut h {
            *v = arch.activation.apply(*v);
        }
    }
    dot(&params.head, &h)
}

/// `grad += coef · ∂f/∂θ` evaluated at the recorded forward pass.
pub(crate) fn accumulate_output_grad(
    params: &Params,
    arch: &Architecture,
    pass: &ForwardPass,
    coef: f64,
    grad: &mut Params,
) {
    accumulate_output_grad_with(params, arch, pass, coef, grad, |_, _, z| arch.activation.derivative(z));
}

/// [`accumulate_output_grad`] with the activation derivative of unit `j` in
/// hidden layer `k` (0-based) supplied by `deriv(k, j, z)`.
pub(crate) fn accumulate_output_grad_with(
    params: &Params,
    arch: &Architecture,
    pass: &ForwardPass,
    coef: f64,
    grad: &mut Params,
    deriv: impl Fn(usize, usize, f64) -> f64,
) {
    let k_mats = params.weights.len();
    if !arch.fixed_head {
        axpy(coef, &pass.activations[k_mats], &mut grad.head);
    }
    if k_mats == 0 {
        return;
    }
    let mut delta: Vec<f64> = params
        .head
        .iter()
        .zip(&pass.pre_activations[k_mats - 1])
        .enumerate()
        .map(|(j, (&w, &z))| coef * w * deriv(k_mats - 1, j, z))
        .collect();
    for k in (0..k_mats).rev() {
        grad.weights[k].add_outer(1.0, &delta, &pass.activations[k]);
        if k > 0 {
            let back = params.weights[k].matvec_t(&delta);
            delta = back
                .iter()
                .zip(&pass.pre_activations[k - 1])
                .enumerate()
                .map(|(j, (&b, &z))| b * deriv(k - 1, j, z))
                .collect();
        }
    }
}

/// `(f(x), ∂f/∂θ)`. The head block is zero for a fixed head.
pub fn output_grad(params: &Params, arch: &Architecture, x: &[f64]) -> Result<(f64, Params)> {
    let pass = forward(params, arch, x)?;
    let mut grad = Params::zeros(arch);
    accumulate_output_grad(params, arch, &pass, 1.0, &mut grad);
    Ok((pass.output, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    /// `L(θ)`
    pub loss: f64,
    /// `L_λ(θ) = L(θ) + (λ/2)‖θ‖²`
    pub reg_loss: f64,
    /// `∇L_λ(θ) = ∇L(θ) + λθ`
    pub grad: Params,
    /// `∇L(θ)`
    pub data_grad: Params,
}

/// Adds `(1/scale) Σ_{i ∈ idx} ∇ℓ(y_i f(x_i))` to `grad` and returns the summed
/// (unscaled) loss. Examples are reduced in the order given.
pub(crate) fn accumulate_data_grad(
    params: &Params,
    arch: &Architecture,
    data: &Dataset,
    idx: impl Iterator<Item = usize>,
    scale: f64,
    grad: &mut Params,
) -> f64 {
    let mut total = 0.0;
    for i in idx {
        let pass = forward_unchecked(params, arch, &data.inputs[i]);
        let y = data.labels[i];
        let (l, slope) = logistic_pair(y * pass.output);
        total += l;
        accumulate_output_grad(params, arch, &pass, slope * y / scale, grad);
    }
    total
}

pub(crate) fn check_data(arch: &Architecture, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if data.dim() != arch.input_dim {
        return Err(Error::invalid(format!(
            "data dim {} does not match input_dim {}",
            data.dim(),
            arch.input_dim
        )));
    }
    Ok(())
}

/// `L(θ) = (1/n) Σ ℓ(y_i f(x_i))`
pub fn empirical_loss(params: &Params, arch: &Architecture, data: &Dataset) -> f64 {
    let n = data.len() as f64;
    data.inputs
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| logistic_pair(y * predict(params, arch, x)).0)
        .sum::<f64>()
        / n
}

pub fn regularized_loss_and_grad(
    params: &Params,
    arch: &Architecture,
    data: &Dataset,
    lambda: f64,
) -> Result<LossGrad> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("weight decay must be non-negative"));
    }
    params.check(arch)?;
    check_data(arch, data)?;
    let n = data.len();
    let mut data_grad = Params::zeros(arch);
    let loss = accumulate_data_grad(params, arch, data, 0..n, n as f64, &mut data_grad) / n as f64;
    let mut grad = data_grad.clone();
    for (g, w) in grad.weights.iter_mut().zip(&params.weights) {
        g.add_scaled(lambda, w);
    }
    if !arch.fixed_head {
        axpy(lambda, &params.head, &mut grad.head);
    }
    let reg_loss = loss + 0.5 * lambda * params.trainable_norm_sq(arch);
    Ok(LossGrad {
        loss,
        reg_loss,
        grad,
        data_grad,
    })
}

/// `w = (w_Kᵀ W_{K-1} ⋯ W_1)ᵀ` for a deep linear network.
pub fn end_to_end_vector(params: &Params, arch: &Architecture) -> Result<Vec<f64>> {
    if !arch.activation.is_linear() {
        return Err(Error::Unsupported(
            "end-to-end vector needs the identity activation".into(),
        ));
    }
    params.check(arch)?;
    Ok(params
        .weights
        .iter()
        .rev()
        .fold(params.head.clone(), |v, w| w.matvec_t(&v)))
}

/// Fixed head for the shallow network: entries `±1/√m`, signs from the seed.
pub fn shallow_head(width: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng::stream(seed, "shallow-head");
    let c = 1.0 / (width as f64).sqrt();
    (0..width).map(|_| if r.random::<bool>() { c } else { -c }).collect()
}
