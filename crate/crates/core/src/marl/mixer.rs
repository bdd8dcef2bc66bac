use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::numerics::{Gradients, Network, Parameters, Tape};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Vdn,
    Mono,
}

impl std::str::FromStr for MixerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vdn" => Ok(MixerKind::Vdn),
            "mono" | "monotonic" => Ok(MixerKind::Mono),
            other => Err(crate::Error::InvalidConfig(format!("unknown mixer `{other}`"))),
        }
    }
}

/// Combines per-agent chosen Q-values into `Q_tot`.
///
/// `Mono` computes `sum_i |w_i(s)| Q_i + b(s)` where `w` and `b` come from
/// state-conditioned hypernetworks; non-negative weights keep `Q_tot`
/// monotone in every `Q_i`, so per-agent greedy actions are jointly greedy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Mixer {
    Vdn,
    Mono { weights: Network, bias: Network },
}

/// Forward values kept for [`Mixer::backward`].
pub struct MixTape {
    raw_weights: Option<Array2<f64>>,
    weight_tape: Option<Tape>,
    bias_tape: Option<Tape>,
}

impl Mixer {
    pub fn new(kind: MixerKind, state_dim: usize, n_agents: usize, hidden: usize, rng: &mut Rng) -> Self {
        match kind {
            MixerKind::Vdn => Mixer::Vdn,
            MixerKind::Mono => Mixer::Mono {
                weights: Network::mlp(&[state_dim, hidden, n_agents], rng),
                bias: Network::mlp(&[state_dim, hidden, 1], rng),
            },
        }
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Vdn => MixerKind::Vdn,
            Mixer::Mono { .. } => MixerKind::Mono,
        }
    }

    /// `Q_tot` for each row of `qs` (one column per agent) and `states`.
    pub fn mix(&self, qs: ArrayView2<f64>, states: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(qs, states)?.0)
    }

    pub fn forward(&self, qs: ArrayView2<f64>, states: ArrayView2<f64>) -> Result<(Array1<f64>, MixTape)> {
        check_len("mixer batch", qs.nrows(), states.nrows())?;
        match self {
            Mixer::Vdn => Ok((
                qs.sum_axis(Axis(1)),
                MixTape {
                    raw_weights: None,
                    weight_tape: None,
                    bias_tape: None,
                },
            )),
            Mixer::Mono { weights, bias } => {
                check_len("mixer agents", weights.output_dim(), qs.ncols())?;
                let (w, w_tape) = weights.forward_batch(states)?;
                let (b, b_tape) = bias.forward_batch(states)?;
                let q_tot = (&w.mapv(f64::abs) * &qs).sum_axis(Axis(1)) + b.column(0);
                Ok((
                    q_tot,
                    MixTape {
                        raw_weights: Some(w),
                        weight_tape: Some(w_tape),
                        bias_tape: Some(b_tape),
                    },
                ))
            }
        }
    }

    /// Given `dL/dQ_tot` per row, returns the flat mixer parameter gradient
    /// and `dL/dQ_i`.
    pub fn backward(
        &self,
        tape: &MixTape,
        qs: ArrayView2<f64>,
        grad_tot: ArrayView1<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let g_col = grad_tot.insert_axis(Axis(1));
        match self {
            Mixer::Vdn => Ok((Vec::new(), g_col.broadcast(qs.raw_dim()).expect("broadcast").to_owned())),
            Mixer::Mono { weights, bias } => {
                let w = tape.raw_weights.as_ref().expect("mono tape");
                let grad_qs = &w.mapv(f64::abs) * &g_col;
                let grad_w = &(&qs * &w.mapv(f64::signum)) * &g_col;
                let (gw, _): (Gradients, _) = weights.backward(tape.weight_tape.as_ref().expect("mono tape"), grad_w.view())?;
                let (gb, _) = bias.backward(tape.bias_tape.as_ref().expect("mono tape"), g_col)?;
                let mut flat = gw.to_flat();
                gb.write_flat(&mut flat);
                Ok((flat, grad_qs))
            }
        }
    }
}

impl Parameters for Mixer {
    fn param_count(&self) -> usize {
        match self {
            Mixer::Vdn => 0,
            Mixer::Mono { weights, bias } => weights.param_count() + bias.param_count(),
        }
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        if let Mixer::Mono { weights, bias } = self {
            weights.write_params(out);
            bias.write_params(out);
        }
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        match self {
            Mixer::Vdn => 0,
            Mixer::Mono { weights, bias } => {
                let n = weights.read_params(src);
                n + bias.read_params(&src[n..])
            }
        }
    }
}
