use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::Rng;

/// Element-wise activation applied after the affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer `activation(W x + b)` with `W` stored as `out x in`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// Parameter gradients of a [`DenseLayer`].
#[derive(Clone, Debug)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        check_len("dense bias", weight.nrows(), bias.len())?;
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense parameters"));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(input_dim: usize, output_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = (6.0 / (input_dim + output_dim) as f64).sqrt();
        let weight = Array2::from_shape_fn((output_dim, input_dim), |_| rng.random_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(output_dim),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Single-vector forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("dense input", self.input_dim(), input.len())?;
        Ok(self
            .weight
            .outer_iter()
            .zip(self.bias.iter())
            .map(|(row, b)| {
                let z = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                self.activation.apply(z)
            })
            .collect())
    }

    /// Batched forward pass over the rows of `input`; returns
    /// `(pre_activation, output)`.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        check_len("dense batch input", self.input_dim(), input.ncols())?;
        let mut pre = input.dot(&self.weight.t());
        pre += &self.bias;
        let out = match self.activation {
            Activation::Identity => pre.clone(),
            act => pre.mapv(|z| act.apply(z)),
        };
        Ok((pre, out))
    }

    /// Reverse pass given the layer input, the cached pre-activation and the
    /// gradient w.r.t. the layer output.
    pub fn backward_batch(
        &self,
        input: ArrayView2<f64>,
        pre: &Array2<f64>,
        grad_out: ArrayView2<f64>,
    ) -> (DenseGrad, Array2<f64>) {
        let grad_pre = match self.activation {
            Activation::Identity => grad_out.to_owned(),
            act => {
                let mut g = grad_out.to_owned();
                g.zip_mut_with(pre, |g, &z| *g *= act.derivative(z));
                g
            }
        };
        let weight = grad_pre.t().dot(&input);
        let bias = grad_pre.sum_axis(Axis(0));
        let grad_in = grad_pre.dot(&self.weight);
        (DenseGrad { weight, bias }, grad_in)
    }
}

/// Per-row layer normalization with learned gain and shift.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
    pub epsilon: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormGrad {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

/// Values retained from the forward pass of a [`LayerNorm`].
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            shift: Array1::zeros(dim),
            epsilon: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let row = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row shape");
        let (out, _) = self.forward_batch(row.view())?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, LayerNormCache)> {
        check_len("layer norm input", self.dim(), input.ncols())?;
        let n = input.ncols() as f64;
        let mut normalized = input.to_owned();
        let mut inv_std = Array1::zeros(input.nrows());
        for (mut row, s) in normalized.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            *s = 1.0 / (var + self.epsilon).sqrt();
            let inv = *s;
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let mut out = &normalized * &self.gain;
        out += &self.shift;
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward_batch(
        &self,
        cache: &LayerNormCache,
        grad_out: ArrayView2<f64>,
    ) -> (LayerNormGrad, Array2<f64>) {
        let gain = (&grad_out * &cache.normalized).sum_axis(Axis(0));
        let shift = grad_out.sum_axis(Axis(0));
        let n = self.dim() as f64;
        let grad_norm = &grad_out * &self.gain;
        let mut grad_in = Array2::zeros(grad_out.raw_dim());
        for (((g_in, g_hat), xhat), &inv) in grad_in
            .outer_iter_mut()
            .zip(grad_norm.outer_iter())
            .zip(cache.normalized.outer_iter())
            .zip(cache.inv_std.iter())
        {
            let sum_g = g_hat.sum();
            let sum_gx = g_hat.iter().zip(xhat.iter()).map(|(g, x)| g * x).sum::<f64>();
            let mut g_in = g_in;
            for ((dst, g), x) in g_in.iter_mut().zip(g_hat.iter()).zip(xhat.iter()) {
                *dst = inv / n * (n * g - sum_g - x * sum_gx);
            }
        }
        (LayerNormGrad { gain, shift }, grad_in)
    }
}
