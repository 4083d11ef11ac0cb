//! Dense feed-forward networks with hand-written backprop.
//!
//! Everything is batched: inputs are `(batch, in_dim)` matrices and a
//! forward pass returns a [`ForwardCache`] that [`Mlp::backward`] consumes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the activation output.
    fn backprop(self, out: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Tanh => Zip::from(grad).and(out).for_each(|g, &y| *g *= 1.0 - y * y),
            Activation::Relu => Zip::from(grad).and(out).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
        }
    }
}

/// Output head applied after the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Identity,
    Sigmoid,
    /// First half of the outputs is a mean, second half a log-variance
    /// clamped to `[log_var_min, log_var_max]`.
    Gaussian { log_var_min: f64, log_var_max: f64 },
}

impl Head {
    pub const fn gaussian() -> Self {
        Head::Gaussian {
            log_var_min: -8.0,
            log_var_max: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
    head: Head,
}

/// Intermediates kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Last affine layer output, before the head.
    pub raw: Array2<f64>,
    /// Head output.
    pub output: Array2<f64>,
}

/// Parameter gradients, laid out like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp.layers.iter().map(|l| Dense::zeros(l.in_dim(), l.out_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight *= k;
            l.bias *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flattened in the same order as [`Mlp::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

/// Layer sizes and choices for [`Mlp::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: Vec<usize>,
    /// Head output size; for a Gaussian head this is the latent dimension and
    /// the last layer has twice as many units.
    pub output: usize,
    pub activation: Activation,
    pub head: Head,
}

impl Mlp {
    /// Uniform fan-in initialization in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(shape: &MlpShape, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(shape)?;
        for layer in &mut mlp.layers {
            let bound = 1.0 / (layer.in_dim() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
            layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(mlp)
    }

    pub fn zeros(shape: &MlpShape) -> Result<Self> {
        if shape.input == 0 || shape.output == 0 || shape.hidden.contains(&0) {
            return Err(Error::Config("network layer sizes must be >= 1".into()));
        }
        let last = match shape.head {
            Head::Gaussian { log_var_min, log_var_max } => {
                if !(log_var_min < log_var_max) {
                    return Err(Error::Config("gaussian head needs log_var_min < log_var_max".into()));
                }
                2 * shape.output
            }
            _ => shape.output,
        };
        let mut sizes = vec![shape.input];
        sizes.extend(&shape.hidden);
        sizes.push(last);
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self {
            layers,
            activation: shape.activation,
            head: shape.head,
        })
    }

    /// Builds a network from explicit layers, checking that they chain.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for w in layers.windows(2) {
            check_dim("layer chaining", w[0].out_dim(), w[1].in_dim())?;
        }
        for l in &layers {
            check_dim("layer bias", l.out_dim(), l.bias.len())?;
        }
        if matches!(head, Head::Gaussian { .. }) && !layers.last().unwrap().out_dim().is_multiple_of(2) {
            return Err(Error::Config("gaussian head needs an even output layer".into()));
        }
        Ok(Self {
            layers,
            activation,
            head,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Width of the head output (for Gaussian heads: mean and log-variance together).
    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameters", self.param_count(), flat.len())?;
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// Forward pass that keeps what [`Mlp::backward`] needs.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        check_dim("network input", self.input_dim(), input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(x);
            if i < last {
                self.activation.apply(&mut z);
            }
            x = z;
        }
        let output = self.apply_head(&x);
        Ok(ForwardCache {
            inputs,
            raw: x,
            output,
        })
    }

    /// Forward pass without a cache.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.input_dim(), input.ncols())?;
        let last = self.layers.len() - 1;
        let mut x = input.dot(&self.layers[0].weight.t());
        x += &self.layers[0].bias;
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            self.activation.apply(&mut x);
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            x = z;
            debug_assert!(i <= last);
        }
        Ok(self.apply_head(&x))
    }

    /// Single-row convenience wrapper around [`Mlp::predict`].
    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row shape");
        Ok(self.predict(view)?.row(0).to_vec())
    }

    fn apply_head(&self, raw: &Array2<f64>) -> Array2<f64> {
        match self.head {
            Head::Identity => raw.clone(),
            Head::Sigmoid => raw.mapv(sigmoid),
            Head::Gaussian { log_var_min, log_var_max } => {
                let d = raw.ncols() / 2;
                let mut out = raw.clone();
                out.slice_mut(s![.., d..])
                    .mapv_inplace(|v| v.clamp(log_var_min, log_var_max));
                out
            }
        }
    }

    /// Backprop from a gradient on the head output.
    ///
    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, d_output: &Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        check_dim("upstream gradient rows", cache.output.nrows(), d_output.nrows())?;
        check_dim("upstream gradient cols", cache.output.ncols(), d_output.ncols())?;
        let mut d_raw = d_output.clone();
        match self.head {
            Head::Identity => {}
            Head::Sigmoid => Zip::from(&mut d_raw)
                .and(&cache.output)
                .for_each(|g, &p| *g *= p * (1.0 - p)),
            Head::Gaussian { log_var_min, log_var_max } => {
                let d = d_raw.ncols() / 2;
                Zip::from(d_raw.slice_mut(s![.., d..]))
                    .and(cache.raw.slice(s![.., d..]))
                    .for_each(|g, &r| {
                        if r < log_var_min || r > log_var_max {
                            *g = 0.0
                        }
                    });
            }
        }
        self.backward_raw(cache, d_raw)
    }

    /// Backprop from a gradient on the pre-head output.
    pub fn backward_raw(&self, cache: &ForwardCache, d_raw: Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        check_dim("raw gradient cols", cache.raw.ncols(), d_raw.ncols())?;
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Usage("forward cache does not belong to this network".into()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_raw;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let d_w = delta.t().dot(x);
            let d_b = delta.sum_axis(Axis(0));
            grads.push(Dense { weight: d_w, bias: d_b });
            let mut d_x = delta.dot(&layer.weight);
            if i > 0 {
                // x is the activation output of layer i-1
                self.activation.backprop(x, &mut d_x);
            }
            delta = d_x;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Polyak averaging `self ← (1 − tau)·self + tau·source`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            Zip::from(&mut t.weight)
                .and(&s.weight)
                .for_each(|a, &b| *a = (1.0 - tau) * *a + tau * b);
            Zip::from(&mut t.bias)
                .and(&s.bias)
                .for_each(|a, &b| *a = (1.0 - tau) * *a + tau * b);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
