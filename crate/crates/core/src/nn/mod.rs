//! A small fixed-topology multilayer perceptron with hand-written reverse mode.
//!
//! Parameters live in flat `f64` slices so that many networks can share a
//! single arena (see [`crate::transport`]). Each dense layer stores its weight
//! matrix row-major as `in × out`, followed by its bias of length `out`.

mod container;
mod optim;
mod special;

pub use container::{read_container, write_container, CONTAINER_VERSION};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, CosineSchedule};
pub use special::{normal_cdf, normal_pdf};

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    /// Exact GELU, `x Φ(x)` with the erf-based normal CDF.
    Gelu,
    Softplus,
}

/// Numerically stable `ln(1 + eˣ)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    x.mul_add(normal_pdf(x), normal_cdf(x))
}

/// Layer widths and activations of a network; owns no parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    dims: Vec<usize>,
    hidden: Activation,
    output: Activation,
}

/// Intermediates of one forward pass, consumed by [`MlpArch::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    // input to each layer; inputs[0] is the network input
    inputs: Vec<Array2<f64>>,
    // gelu'(pre) for GELU layers, sigmoid(pre) for Softplus, empty otherwise
    aux: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl MlpArch {
    pub fn new(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(in_dim);
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        Self {
            dims,
            hidden: hidden_act,
            output: output_act,
        }
    }

    /// `in_dim → 64 → 64 → 64 → 1` with GELU hidden units.
    pub fn standard(in_dim: usize, output_act: Activation) -> Self {
        Self::new(in_dim, &[64, 64, 64], 1, Activation::Gelu, output_act)
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("at least one layer")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    fn offset(&self, layer: usize) -> usize {
        self.dims[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer<'a>(&self, params: &'a [f64], layer: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.offset(layer);
        let w = ArrayView2::from_shape((i, o), &params[off..off + i * o]).expect("weight shape");
        let b = ArrayView1::from(&params[off + i * o..off + i * o + o]);
        (w, b)
    }

    /// Mutable views of the weight and bias of `layer`.
    pub fn layer_mut<'a>(
        &self,
        params: &'a mut [f64],
        layer: usize,
    ) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.offset(layer);
        let (w, b) = params[off..off + i * o + o].split_at_mut(i * o);
        (
            ArrayViewMut2::from_shape((i, o), w).expect("weight shape"),
            ArrayViewMut1::from(b),
        )
    }

    fn check(&self, params: &[f64], x: &ArrayView2<f64>) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::ShapeMismatch {
                expected: self.n_params(),
                got: params.len(),
            });
        }
        if x.ncols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.in_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// He-initialized weights and zero biases for every layer.
    pub fn init_he<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        for layer in 0..self.n_layers() {
            let fan_in = self.dims[layer];
            let (mut w, mut b) = self.layer_mut(params, layer);
            b.fill(0.0);
            if fan_in == 0 {
                continue;
            }
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            w.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
    }

    /// Deterministic forward pass over a batch (rows are samples).
    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(params, &x)?;
        let mut h = x.to_owned();
        for layer in 0..self.n_layers() {
            let mut z = self.affine(params, layer, h.view());
            match self.activation(layer) {
                Activation::Identity => {}
                Activation::Gelu => special::gelu_inplace(z.as_slice_mut().expect("standard layout")),
                Activation::Softplus => z.mapv_inplace(softplus),
            }
            h = z;
        }
        Ok(h)
    }

    fn affine(&self, params: &[f64], layer: usize, h: ArrayView2<f64>) -> Array2<f64> {
        let (w, b) = self.layer(params, layer);
        let mut z = Array2::from_shape_fn((h.nrows(), w.ncols()), |(_, c)| b[c]);
        general_mat_mul(1.0, &h, &w, 1.0, &mut z);
        z
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_tape(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Tape> {
        self.check(params, &x)?;
        let n = self.n_layers();
        let mut inputs = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        let mut h = x.to_owned();
        for layer in 0..n {
            let z = self.affine(params, layer, h.view());
            let (out, a) = match self.activation(layer) {
                Activation::Identity => (z, Array2::zeros((0, 0))),
                Activation::Gelu => {
                    let mut out = Array2::zeros(z.dim());
                    let mut deriv = Array2::zeros(z.dim());
                    special::gelu_with_derivative(
                        z.as_slice().expect("standard layout"),
                        out.as_slice_mut().expect("standard layout"),
                        deriv.as_slice_mut().expect("standard layout"),
                    );
                    (out, deriv)
                }
                Activation::Softplus => (z.mapv(softplus), z.mapv(sigmoid)),
            };
            inputs.push(h);
            aux.push(a);
            h = out;
        }
        Ok(Tape { inputs, aux, output: h })
    }

    /// Reverse pass: adds parameter gradients into `grad` and returns the
    /// gradient with respect to the network input.
    pub fn backward(&self, params: &[f64], tape: &Tape, dy: ArrayView2<f64>, grad: &mut [f64]) -> Result<Array2<f64>> {
        if grad.len() != self.n_params() {
            return Err(Error::ShapeMismatch {
                expected: self.n_params(),
                got: grad.len(),
            });
        }
        if dy.dim() != tape.output.dim() {
            return Err(Error::ShapeMismatch {
                expected: tape.output.len(),
                got: dy.len(),
            });
        }
        let mut delta = dy.to_owned();
        for layer in (0..self.n_layers()).rev() {
            // delta: cotangent of this layer's output → cotangent of its pre-activation
            match self.activation(layer) {
                Activation::Identity => {}
                Activation::Gelu => delta.zip_mut_with(&tape.aux[layer], |d, &g| *d *= g),
                Activation::Softplus => delta.zip_mut_with(&tape.aux[layer], |d, &sg| *d *= sg),
            }
            let input = &tape.inputs[layer];
            {
                let (mut gw, mut gb) = self.layer_mut(grad, layer);
                general_mat_mul(1.0, &input.t(), &delta, 1.0, &mut gw);
                gb += &delta.sum_axis(Axis(0));
            }
            let (w, _) = self.layer(params, layer);
            let mut dx = Array2::zeros(input.dim());
            general_mat_mul(1.0, &delta, &w.t(), 0.0, &mut dx);
            delta = dx;
        }
        Ok(delta)
    }
}

/// A network together with its own parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: MlpArch,
    pub values: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(arch: MlpArch) -> Self {
        let values = vec![0.0; arch.n_params()];
        Self { arch, values }
    }

    pub fn he<R: Rng + ?Sized>(arch: MlpArch, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        p.arch.init_he(&mut p.values, rng);
        p
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.arch.forward(&self.values, x)
    }

    /// Returns `(parameter gradients, input gradients)` of `Σ dy ⊙ forward(x)`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let tape = self.arch.forward_tape(&self.values, x)?;
        let mut grad = vec![0.0; self.values.len()];
        let dx = self.arch.backward(&self.values, &tape, dy, &mut grad)?;
        Ok((grad, dx))
    }
}

/// Copies the columns of `x` listed in `cols` into a new matrix.
pub(crate) fn gather_columns(x: ArrayView2<f64>, cols: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), cols.len()));
    for (k, &c) in cols.iter().enumerate() {
        out.slice_mut(s![.., k]).assign(&x.column(c));
    }
    out
}
