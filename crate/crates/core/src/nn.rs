//! Forward-only neural network primitives.
//!
//! Parameters are stored as 32-bit floats; dot products accumulate in 64-bit
//! and are rounded back to 32-bit on output.

use crate::error::{Error, Result};

/// Slope used on the negative side of LeakyReLU unless a bundle says otherwise.
pub const DEFAULT_LEAKY_SLOPE: f32 = 0.01;

/// Tag recorded in weight bundles describing the GRU gate equations below.
///
/// ```text
/// z  = sigmoid(W_iz x + W_hz h + b_z)
/// r  = sigmoid(W_ir x + W_hr h + b_r)
/// n  = tanh(W_in x + r * (W_hn h) + b_n)
/// h' = (1 - z) * n + z * h
/// ```
pub const GRU_CONVENTION: &str = "zrn-v1";

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("tensor contains non-finite values".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f32),
    LogSoftmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl DenseLayer {
    /// `weights` is `[out, in]`, `bias` is `[out]`.
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.dims().len() != 2 {
            return Err(Error::Shape(format!(
                "dense weights must be 2-D, got {:?}",
                weights.dims()
            )));
        }
        if bias.dims() != [weights.dims()[0]] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match weights {:?}",
                bias.dims(),
                weights.dims()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        if input.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.in_dim(),
                input.len()
            )));
        }
        let mut out = affine(&self.weights, &self.bias, input);
        match self.activation {
            Activation::None => {}
            Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::LeakyRelu(slope) => out.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= slope
                }
            }),
            Activation::LogSoftmax => out = log_softmax(&out),
        }
        Ok(out)
    }
}

/// `W·x + b` for a `[out, in]` weight matrix. Caller guarantees shapes.
fn affine(weights: &Tensor, bias: &Tensor, input: &[f32]) -> Vec<f32> {
    let cols = input.len();
    weights
        .data()
        .chunks_exact(cols)
        .zip(bias.data())
        .map(|(row, &b)| (dot(row, input) + b as f64) as f32)
        .collect()
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Apply a dense layer to a 1-D tensor.
pub fn dense_forward(layer: &DenseLayer, input: &Tensor) -> Result<Tensor> {
    if input.dims().len() != 1 {
        return Err(Error::Shape(format!(
            "dense input must be 1-D, got {:?}",
            input.dims()
        )));
    }
    Tensor::vector(layer.forward(input.data())?)
}

/// Multi-layer perceptron: a stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "MLP layer widths do not chain: {} -> {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        let mut x = self.layers[0].forward(input)?;
        for layer in &self.layers[1..] {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }
}

/// Parameters of one gate: input weights `[H, I]`, hidden weights `[H, H]`, bias `[H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruGate {
    pub input_weights: Tensor,
    pub hidden_weights: Tensor,
    pub bias: Tensor,
}

impl GruGate {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            input_weights: Tensor::zeros(vec![hidden_size, input_size]),
            hidden_weights: Tensor::zeros(vec![hidden_size, hidden_size]),
            bias: Tensor::zeros(vec![hidden_size]),
        }
    }

    fn check(&self, name: &str, input_size: usize, hidden_size: usize) -> Result<()> {
        let ok = self.input_weights.dims() == [hidden_size, input_size]
            && self.hidden_weights.dims() == [hidden_size, hidden_size]
            && self.bias.dims() == [hidden_size];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "GRU {name} gate shapes {:?}/{:?}/{:?} inconsistent with input {input_size}, hidden {hidden_size}",
                self.input_weights.dims(),
                self.hidden_weights.dims(),
                self.bias.dims()
            )))
        }
    }
}

/// Gated recurrent unit following [`GRU_CONVENTION`].
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    input_size: usize,
    hidden_size: usize,
    update: GruGate,
    reset: GruGate,
    candidate: GruGate,
}

impl GruCell {
    pub fn new(
        input_size: usize,
        hidden_size: usize,
        update: GruGate,
        reset: GruGate,
        candidate: GruGate,
    ) -> Result<Self> {
        if input_size == 0 || hidden_size == 0 {
            return Err(Error::Shape("GRU sizes must be positive".into()));
        }
        update.check("update", input_size, hidden_size)?;
        reset.check("reset", input_size, hidden_size)?;
        candidate.check("candidate", input_size, hidden_size)?;
        Ok(Self {
            input_size,
            hidden_size,
            update,
            reset,
            candidate,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn update_gate(&self) -> &GruGate {
        &self.update
    }

    pub fn reset_gate(&self) -> &GruGate {
        &self.reset
    }

    pub fn candidate_gate(&self) -> &GruGate {
        &self.candidate
    }

    pub fn forward(&self, hidden: &[f32], input: &[f32]) -> Result<Vec<f32>> {
        if hidden.len() != self.hidden_size || input.len() != self.input_size {
            return Err(Error::Shape(format!(
                "GRU expects hidden {} / input {}, got {} / {}",
                self.hidden_size,
                self.input_size,
                hidden.len(),
                input.len()
            )));
        }
        let h = self.hidden_size;
        let (i, hs) = (self.input_size, self.hidden_size);
        let mut out = Vec::with_capacity(h);
        for row in 0..h {
            let z = sigmoid(
                dot(&self.update.input_weights.data()[row * i..(row + 1) * i], input)
                    + dot(&self.update.hidden_weights.data()[row * hs..(row + 1) * hs], hidden)
                    + self.update.bias.data()[row] as f64,
            );
            let r = sigmoid(
                dot(&self.reset.input_weights.data()[row * i..(row + 1) * i], input)
                    + dot(&self.reset.hidden_weights.data()[row * hs..(row + 1) * hs], hidden)
                    + self.reset.bias.data()[row] as f64,
            );
            let n = (dot(&self.candidate.input_weights.data()[row * i..(row + 1) * i], input)
                + r * dot(
                    &self.candidate.hidden_weights.data()[row * hs..(row + 1) * hs],
                    hidden,
                )
                + self.candidate.bias.data()[row] as f64)
                .tanh();
            out.push(((1.0 - z) * n + z * hidden[row] as f64) as f32);
        }
        Ok(out)
    }
}

/// One GRU step on tensors.
pub fn gru_forward(cell: &GruCell, hidden_prev: &Tensor, input: &Tensor) -> Result<Tensor> {
    Tensor::vector(cell.forward(hidden_prev.data(), input.data())?)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable log-softmax, evaluated in 64-bit.
pub fn log_softmax_f64(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    v.iter().map(|&x| x - lse).collect()
}

pub fn log_softmax(v: &[f32]) -> Vec<f32> {
    let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    log_softmax_f64(&wide).into_iter().map(|x| x as f32).collect()
}

/// Softmax probabilities of 32-bit logits, kept in 64-bit.
pub fn softmax(v: &[f32]) -> Vec<f64> {
    let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    log_softmax_f64(&wide).into_iter().map(f64::exp).collect()
}
