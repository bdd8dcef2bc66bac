use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::layer::{Activation, DenseGrad, DenseLayer, LayerNorm, LayerNormCache, LayerNormGrad};
use crate::error::{check_len, Result};
use crate::Rng;

/// Flat view over a model's trainable parameters.
///
/// Parameters are visited in a fixed order; gradients produced for the model
/// use the same order so optimizers can work on plain slices.
pub trait Parameters {
    fn param_count(&self) -> usize;
    fn write_params(&self, out: &mut Vec<f64>);
    /// Overwrites parameters from the front of `src`, returning how many
    /// values were consumed.
    fn read_params(&mut self, src: &[f64]) -> usize;

    fn params_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_params(&mut out);
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer {
    Dense(DenseLayer),
    Norm(LayerNorm),
}

impl Layer {
    fn output_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.output_dim(),
            Layer::Norm(n) => n.dim(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum LayerGrad {
    Dense(DenseGrad),
    Norm(LayerNormGrad),
}

/// Gradients for every parameter of a [`Network`], in layer order.
#[derive(Clone, Debug)]
pub struct Gradients(pub Vec<LayerGrad>);

impl Gradients {
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for g in &self.0 {
            match g {
                LayerGrad::Dense(d) => {
                    out.extend(d.weight.iter());
                    out.extend(d.bias.iter());
                }
                LayerGrad::Norm(n) => {
                    out.extend(n.gain.iter());
                    out.extend(n.shift.iter());
                }
            }
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.write_flat(&mut out);
        out
    }
}

enum StepCache {
    Dense(Array2<f64>),
    Norm(LayerNormCache),
}

/// Activations recorded by [`Network::forward_batch`] for the reverse pass.
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    caches: Vec<StepCache>,
}

impl Tape {
    /// Smallest `|pre-activation|` over ReLU units; finite differences with
    /// steps well below this never cross a kink.
    pub fn relu_margin(&self, network: &Network) -> f64 {
        network
            .layers
            .iter()
            .zip(&self.caches)
            .filter_map(|(layer, cache)| match (layer, cache) {
                (Layer::Dense(d), StepCache::Dense(pre)) if d.activation == Activation::Relu => {
                    Some(pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
                }
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sequential stack of dense and normalization layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Multi-layer perceptron with ReLU between hidden layers and an
    /// identity output; `widths` lists input, hidden and output sizes.
    pub fn mlp(widths: &[usize], rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                Layer::Dense(DenseLayer::xavier(w[0], w[1], act, rng))
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        match self.layers.first() {
            Some(Layer::Dense(d)) => d.input_dim(),
            Some(Layer::Norm(n)) => n.dim(),
            None => 0,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_dim)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.input_dim(), input.len())?;
        let row = ArrayView2::from_shape((1, input.len()), input).expect("row shape");
        Ok(self.predict_batch(row)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass without recording a tape.
    pub fn predict_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut x = input.to_owned();
        for layer in &self.layers {
            x = match layer {
                Layer::Dense(d) => d.forward_batch(x.view())?.1,
                Layer::Norm(n) => n.forward_batch(x.view())?.0,
            };
        }
        Ok(x)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            caches: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_owned();
        for layer in &self.layers {
            let (out, cache) = match layer {
                Layer::Dense(d) => {
                    let (pre, out) = d.forward_batch(x.view())?;
                    (out, StepCache::Dense(pre))
                }
                Layer::Norm(n) => {
                    let (out, cache) = n.forward_batch(x.view())?;
                    (out, StepCache::Norm(cache))
                }
            };
            tape.inputs.push(x);
            tape.caches.push(cache);
            x = out;
        }
        Ok((x, tape))
    }

    /// Reverse pass: parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, tape: &Tape, grad_out: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        check_len("network upstream gradient", self.output_dim(), grad_out.ncols())?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_owned();
        for ((layer, input), cache) in self.layers.iter().zip(&tape.inputs).zip(&tape.caches).rev() {
            let (lg, g_in) = match (layer, cache) {
                (Layer::Dense(d), StepCache::Dense(pre)) => {
                    let (lg, g_in) = d.backward_batch(input.view(), pre, g.view());
                    (LayerGrad::Dense(lg), g_in)
                }
                (Layer::Norm(n), StepCache::Norm(c)) => {
                    let (lg, g_in) = n.backward_batch(c, g.view());
                    (LayerGrad::Norm(lg), g_in)
                }
                _ => unreachable!("tape recorded by a different network"),
            };
            grads.push(lg);
            g = g_in;
        }
        grads.reverse();
        Ok((Gradients(grads), g))
    }

    /// Single-sample backprop: gradients of `upstream · f(input)`.
    pub fn backprop(&self, input: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        check_len("network input", self.input_dim(), input.len())?;
        check_len("network upstream gradient", self.output_dim(), upstream.len())?;
        let row = ArrayView2::from_shape((1, input.len()), input).expect("row shape");
        let (_, tape) = self.forward_batch(row)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row shape");
        let (grads, g_in) = self.backward(&tape, up)?;
        Ok((grads, g_in.into_raw_vec_and_offset().0))
    }
}

impl Parameters for Network {
    fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weight.len() + d.bias.len(),
                Layer::Norm(n) => 2 * n.dim(),
            })
            .sum()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            match l {
                Layer::Dense(d) => {
                    out.extend(d.weight.iter());
                    out.extend(d.bias.iter());
                }
                Layer::Norm(n) => {
                    out.extend(n.gain.iter());
                    out.extend(n.shift.iter());
                }
            }
        }
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let mut pos = 0;
        let mut fill = |dst: &mut dyn Iterator<Item = &mut f64>| {
            for v in dst {
                *v = src[pos];
                pos += 1;
            }
        };
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    fill(&mut d.weight.iter_mut());
                    fill(&mut d.bias.iter_mut());
                }
                Layer::Norm(n) => {
                    fill(&mut n.gain.iter_mut());
                    fill(&mut n.shift.iter_mut());
                }
            }
        }
        pos
    }
}
