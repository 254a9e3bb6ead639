//! Small layer building blocks on top of the primitive operators.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fully connected layer over the last axis, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Self::with_init(store, name, Tensor::randn([in_dim, out_dim], std, rng), Tensor::zeros([out_dim]))
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_init(store, name, Tensor::zeros([in_dim, out_dim]), Tensor::zeros([out_dim]))
    }

    pub fn with_init(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        linear(g, store, x, self.weight, self.bias)
    }
}

/// `x[.., in] * w[in, out] + b[out]`, preserving leading axes.
pub fn linear(g: &mut Graph, store: &ParamStore, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let in_dim = *shape.last().expect("non-empty shape");
    let w_shape = store.get(weight).shape();
    if w_shape.len() != 2 || w_shape[0] != in_dim {
        return Err(Error::shape("linear", &shape, w_shape));
    }
    let out_dim = w_shape[1];
    let rows = shape.iter().product::<usize>() / in_dim;
    let w = g.param(store, weight);
    let b = g.param(store, bias);
    let flat = g.reshape(x, &[rows, in_dim])?;
    let y = g.matmul(flat, w)?;
    let y = g.add(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty shape") = out_dim;
    g.reshape(y, &out_shape)
}

/// Square-kernel convolution over an NHWC map, weight stored `[k*k*in, out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub proj: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            proj: Linear::new(store, name, kernel * kernel * in_ch, out_ch, rng),
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x
        } else {
            g.im2col(x, self.kernel, self.stride, self.pad)?
        };
        self.proj.forward(g, store, cols)
    }
}

/// Layer normalization with learned affine terms.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}
