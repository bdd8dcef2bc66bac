//! State embedders mapping a global state (optionally conditioned on the
//! normalized timestep) to a low-dimensional memory key.
//!
//! Three variants share one interface:
//!
//! - `Random`: a frozen Gaussian projection, the classic episodic-control key.
//! - `EmbNet`: an encoder trained jointly with a return-prediction decoder.
//! - `Dcae`: a deterministic conditional autoencoder. Encoder and decoder both
//!   see the timestep; the decoder trunk feeds a return head and a state
//!   reconstruction head.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::memory::EpisodicBuffer;
use crate::numerics::{
    adam_step, Activation, AdamState, DenseLayer, Layer, LayerNorm, Network, Parameters, DEFAULT_LR,
};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Random,
    EmbNet,
    Dcae,
}

impl std::str::FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(EmbedMode::Random),
            "embnet" => Ok(EmbedMode::EmbNet),
            "dcae" => Ok(EmbedMode::Dcae),
            other => Err(Error::InvalidConfig(format!("unknown embedding mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub mode: EmbedMode,
    pub embed_dim: usize,
    pub lambda_rcon: f64,
    /// Environment steps between embedder updates.
    pub t_emb: usize,
    /// Records drawn from the episodic buffer per update (capped at its size).
    pub train_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            mode: EmbedMode::Dcae,
            embed_dim: 4,
            lambda_rcon: 0.1,
            t_emb: 1000,
            train_samples: 102_400,
            batch_size: 1024,
            lr: DEFAULT_LR,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be at least 1".into()));
        }
        if !(self.lambda_rcon >= 0.0) {
            return Err(Error::InvalidConfig("lambda_rcon must be non-negative".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.train_samples {
            return Err(Error::InvalidConfig("need 1 <= batch_size <= train_samples".into()));
        }
        if self.t_emb == 0 {
            return Err(Error::InvalidConfig("t_emb must be at least 1".into()));
        }
        Ok(())
    }
}

const HIDDEN: usize = 64;
const EMBNET_DECODER_HIDDEN: usize = 128;

/// Parameters of one embedder variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum EmbedderParams {
    Random {
        /// `k x state_dim`, frozen.
        projection: Array2<f64>,
    },
    EmbNet {
        encoder: Network,
        decoder: Network,
    },
    Dcae {
        encoder: Network,
        trunk: Network,
        return_head: Network,
        recon_head: Network,
    },
}

impl EmbedderParams {
    pub fn random(state_dim: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / embed_dim as f64).sqrt()).expect("valid std");
        EmbedderParams::Random {
            projection: Array2::from_shape_fn((embed_dim, state_dim), |_| normal.sample(rng)),
        }
    }

    pub fn embnet(state_dim: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let mut encoder = Network::mlp(&[state_dim, HIDDEN, embed_dim], rng);
        encoder.layers.push(Layer::Norm(LayerNorm::new(embed_dim)));
        let h = EMBNET_DECODER_HIDDEN;
        let decoder = Network::mlp(&[embed_dim, h, h, 1], rng);
        EmbedderParams::EmbNet { encoder, decoder }
    }

    pub fn dcae(state_dim: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let encoder = Network::mlp(&[state_dim + 1, HIDDEN, HIDDEN, embed_dim], rng);
        let trunk = Network::new(vec![
            Layer::Dense(DenseLayer::xavier(embed_dim + 1, HIDDEN, Activation::Relu, rng)),
            Layer::Dense(DenseLayer::xavier(HIDDEN, HIDDEN, Activation::Relu, rng)),
        ]);
        let return_head = Network::mlp(&[HIDDEN, 1], rng);
        let recon_head = Network::mlp(&[HIDDEN, state_dim], rng);
        EmbedderParams::Dcae {
            encoder,
            trunk,
            return_head,
            recon_head,
        }
    }

    pub fn mode(&self) -> EmbedMode {
        match self {
            EmbedderParams::Random { .. } => EmbedMode::Random,
            EmbedderParams::EmbNet { .. } => EmbedMode::EmbNet,
            EmbedderParams::Dcae { .. } => EmbedMode::Dcae,
        }
    }

    fn networks(&self) -> Vec<&Network> {
        match self {
            EmbedderParams::Random { .. } => vec![],
            EmbedderParams::EmbNet { encoder, decoder } => vec![encoder, decoder],
            EmbedderParams::Dcae {
                encoder,
                trunk,
                return_head,
                recon_head,
            } => vec![encoder, trunk, return_head, recon_head],
        }
    }

    fn networks_mut(&mut self) -> Vec<&mut Network> {
        match self {
            EmbedderParams::Random { .. } => vec![],
            EmbedderParams::EmbNet { encoder, decoder } => vec![encoder, decoder],
            EmbedderParams::Dcae {
                encoder,
                trunk,
                return_head,
                recon_head,
            } => vec![encoder, trunk, return_head, recon_head],
        }
    }
}

impl Parameters for EmbedderParams {
    fn param_count(&self) -> usize {
        self.networks().iter().map(|n| n.param_count()).sum()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for n in self.networks() {
            n.write_params(out);
        }
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        let mut pos = 0;
        for n in self.networks_mut() {
            pos += n.read_params(&src[pos..]);
        }
        pos
    }
}

/// One training example: a stored state, its best return, and its
/// normalized timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedSample {
    pub state: Vec<f64>,
    pub ret: f64,
    pub t: f64,
}

/// A state embedder together with its optimizer state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedder {
    pub params: EmbedderParams,
    pub config: EmbeddingConfig,
    state_dim: usize,
    adam: AdamState,
    /// Incremented whenever parameters change; lets callers cache keys.
    version: u64,
}

impl Embedder {
    pub fn new(state_dim: usize, config: EmbeddingConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let k = config.embed_dim;
        let params = match config.mode {
            EmbedMode::Random => EmbedderParams::random(state_dim, k, rng),
            EmbedMode::EmbNet => EmbedderParams::embnet(state_dim, k, rng),
            EmbedMode::Dcae => EmbedderParams::dcae(state_dim, k, rng),
        };
        Ok(Self::from_params(params, state_dim, config))
    }

    pub fn from_params(params: EmbedderParams, state_dim: usize, mut config: EmbeddingConfig) -> Self {
        config.mode = params.mode();
        let adam = AdamState::new(params.param_count(), config.lr);
        Self {
            params,
            config,
            state_dim,
            adam,
            version: 0,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_trainable(&self) -> bool {
        self.params.mode() != EmbedMode::Random
    }

    /// Key for state `s` at normalized timestep `t` (ignored by the random
    /// projection and by EmbNet).
    pub fn embed(&self, state: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("embedder state", self.state_dim, state.len())?;
        let states = ArrayView2::from_shape((1, state.len()), state).expect("row shape");
        Ok(self.embed_batch(states, &[t])?.into_raw_vec_and_offset().0)
    }

    /// Keys for each row of `states`.
    pub fn embed_batch(&self, states: ArrayView2<f64>, times: &[f64]) -> Result<Array2<f64>> {
        check_len("embedder state", self.state_dim, states.ncols())?;
        check_len("embedder times", states.nrows(), times.len())?;
        match &self.params {
            EmbedderParams::Random { projection } => Ok(states.dot(&projection.t())),
            EmbedderParams::EmbNet { encoder, .. } => encoder.predict_batch(states),
            EmbedderParams::Dcae { encoder, .. } => encoder.predict_batch(with_time(states, times).view()),
        }
    }

    /// Training loss of the current variant on `batch` (EmbNet: return
    /// prediction; dCAE: return prediction plus scaled reconstruction).
    pub fn loss(&self, batch: &[EmbedSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("embedder batch"));
        }
        let (states, returns, times) = stack(batch, self.state_dim)?;
        let n = batch.len() as f64;
        match &self.params {
            EmbedderParams::Random { .. } => Ok(0.0),
            EmbedderParams::EmbNet { encoder, decoder } => {
                let pred = decoder.predict_batch(encoder.predict_batch(states.view())?.view())?;
                Ok((&pred.column(0) - &returns).mapv(|e| e * e).sum() / n)
            }
            EmbedderParams::Dcae {
                encoder,
                trunk,
                return_head,
                recon_head,
            } => {
                let x = encoder.predict_batch(with_time(states.view(), &times).view())?;
                let z = trunk.predict_batch(with_time(x.view(), &times).view())?;
                let h_err = &return_head.predict_batch(z.view())?.column(0) - &returns;
                let s_err = recon_head.predict_batch(z.view())? - &states;
                let lambda = self.config.lambda_rcon;
                Ok((h_err.mapv(|e| e * e).sum() + lambda * s_err.mapv(|e| e * e).sum()) / n)
            }
        }
    }

    /// Loss and its gradient w.r.t. the flat parameter vector.
    pub fn loss_and_grad(&self, batch: &[EmbedSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("embedder batch"));
        }
        let (states, returns, times) = stack(batch, self.state_dim)?;
        let n = batch.len() as f64;
        match &self.params {
            EmbedderParams::Random { .. } => Ok((0.0, Vec::new())),
            EmbedderParams::EmbNet { encoder, decoder } => {
                let (x, enc_tape) = encoder.forward_batch(states.view())?;
                let (pred, dec_tape) = decoder.forward_batch(x.view())?;
                let err = &pred.column(0) - &returns;
                let loss = err.mapv(|e| e * e).sum() / n;
                let g_pred = err.mapv(|e| 2.0 * e / n).insert_axis(Axis(1));
                let (dec_grads, g_x) = decoder.backward(&dec_tape, g_pred.view())?;
                let (enc_grads, _) = encoder.backward(&enc_tape, g_x.view())?;
                let mut flat = enc_grads.to_flat();
                dec_grads.write_flat(&mut flat);
                Ok((loss, flat))
            }
            EmbedderParams::Dcae {
                encoder,
                trunk,
                return_head,
                recon_head,
            } => {
                let lambda = self.config.lambda_rcon;
                let k = self.config.embed_dim;
                let (x, enc_tape) = encoder.forward_batch(with_time(states.view(), &times).view())?;
                let (z, trunk_tape) = trunk.forward_batch(with_time(x.view(), &times).view())?;
                let (h_pred, h_tape) = return_head.forward_batch(z.view())?;
                let (s_pred, s_tape) = recon_head.forward_batch(z.view())?;
                let h_err = &h_pred.column(0) - &returns;
                let s_err = &s_pred - &states;
                let loss = (h_err.mapv(|e| e * e).sum() + lambda * s_err.mapv(|e| e * e).sum()) / n;
                let g_h = h_err.mapv(|e| 2.0 * e / n).insert_axis(Axis(1));
                let g_s = s_err.mapv(|e| 2.0 * lambda * e / n);
                let (h_grads, g_z_h) = return_head.backward(&h_tape, g_h.view())?;
                let (s_grads, g_z_s) = recon_head.backward(&s_tape, g_s.view())?;
                let g_z = g_z_h + g_z_s;
                let (trunk_grads, g_trunk_in) = trunk.backward(&trunk_tape, g_z.view())?;
                let g_x = g_trunk_in.slice(s![.., ..k]);
                let (enc_grads, _) = encoder.backward(&enc_tape, g_x)?;
                let mut flat = enc_grads.to_flat();
                trunk_grads.write_flat(&mut flat);
                h_grads.write_flat(&mut flat);
                s_grads.write_flat(&mut flat);
                Ok((loss, flat))
            }
        }
    }

    /// Smallest `|pre-activation|` of any ReLU unit over `batch`; a gradient
    /// check with finite-difference steps far below this sees a smooth loss.
    pub fn relu_margin(&self, batch: &[EmbedSample]) -> Result<f64> {
        let (states, _, times) = stack(batch, self.state_dim)?;
        Ok(match &self.params {
            EmbedderParams::Random { .. } => f64::INFINITY,
            EmbedderParams::EmbNet { encoder, decoder } => {
                let (x, enc) = encoder.forward_batch(states.view())?;
                let (_, dec) = decoder.forward_batch(x.view())?;
                enc.relu_margin(encoder).min(dec.relu_margin(decoder))
            }
            EmbedderParams::Dcae { encoder, trunk, .. } => {
                let (x, enc) = encoder.forward_batch(with_time(states.view(), &times).view())?;
                let (_, tr) = trunk.forward_batch(with_time(x.view(), &times).view())?;
                enc.relu_margin(encoder).min(tr.relu_margin(trunk))
            }
        })
    }

    /// One optimizer step on `batch`; returns the pre-step loss.
    pub fn train_step(&mut self, batch: &[EmbedSample]) -> Result<f64> {
        if !self.is_trainable() {
            return Ok(0.0);
        }
        let (loss, grads) = self.loss_and_grad(batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("embedder loss"));
        }
        let mut params = self.params.params_vec();
        adam_step(&mut params, &grads, &mut self.adam)?;
        self.params.read_params(&params);
        self.version += 1;
        Ok(loss)
    }
}

fn with_time(states: ArrayView2<f64>, times: &[f64]) -> Array2<f64> {
    let (rows, cols) = states.dim();
    let mut out = Array2::zeros((rows, cols + 1));
    out.slice_mut(s![.., ..cols]).assign(&states);
    for (r, &t) in times.iter().enumerate() {
        out[[r, cols]] = t;
    }
    out
}

fn stack(batch: &[EmbedSample], state_dim: usize) -> Result<(Array2<f64>, ndarray::Array1<f64>, Vec<f64>)> {
    let mut states = Array2::zeros((batch.len(), state_dim));
    for (mut row, sample) in states.outer_iter_mut().zip(batch) {
        check_len("embedder sample state", state_dim, sample.state.len())?;
        row.assign(&ndarray::ArrayView1::from(&sample.state));
    }
    let returns = batch.iter().map(|b| b.ret).collect();
    let times = batch.iter().map(|b| b.t).collect();
    Ok((states, returns, times))
}

/// Periodic embedder update: draws `min(N, |buffer|)` records without
/// replacement and takes one optimizer step per full minibatch (a single
/// short batch when fewer than `B` records exist). Returns per-batch losses.
pub fn train_embedder(embedder: &mut Embedder, buffer: &EpisodicBuffer, rng: &mut Rng) -> Result<Vec<f64>> {
    let size = buffer.len();
    if !embedder.is_trainable() || size == 0 {
        return Ok(Vec::new());
    }
    let n = embedder.config.train_samples.min(size);
    let picks = index::sample(rng, size, n).into_vec();
    let batch_size = embedder.config.batch_size.min(n);
    let records = buffer.records();
    let mut losses = Vec::with_capacity(n / batch_size);
    for chunk in picks.chunks_exact(batch_size) {
        let batch: Vec<EmbedSample> = chunk
            .iter()
            .map(|&i| {
                let r = &records[i];
                EmbedSample {
                    state: r.state.clone(),
                    ret: r.h,
                    t: r.t,
                }
            })
            .collect();
        losses.push(embedder.train_step(&batch)?);
    }
    Ok(losses)
}
