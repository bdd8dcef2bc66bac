use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{Action, JointAction};
use crate::error::{check_len, Result};
use crate::numerics::{Network, Parameters};
use crate::Rng;

/// Feed-forward per-agent utility network, shared across agents.
///
/// Input is the agent's observation, a one-hot agent id and a one-hot of the
/// agent's previous action (all zeros at the first step); output is one
/// Q-value per action.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentNet {
    pub net: Network,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
}

impl AgentNet {
    pub fn new(obs_dim: usize, n_agents: usize, n_actions: usize, hidden: usize, rng: &mut Rng) -> Self {
        let input = obs_dim + n_agents + n_actions;
        Self {
            net: Network::mlp(&[input, hidden, n_actions], rng),
            n_agents,
            n_actions,
            obs_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_agents + self.n_actions
    }

    pub fn write_input(&self, obs: &[f64], agent: usize, last_action: Option<usize>, out: &mut [f64]) {
        out.fill(0.0);
        out[..self.obs_dim].copy_from_slice(obs);
        out[self.obs_dim + agent] = 1.0;
        if let Some(a) = last_action {
            out[self.obs_dim + self.n_agents + a] = 1.0;
        }
    }

    /// One input row per agent.
    pub fn inputs(&self, observations: &[Vec<f64>], last_actions: Option<&[usize]>) -> Result<Array2<f64>> {
        check_len("agent observations", self.n_agents, observations.len())?;
        let mut rows = Array2::zeros((self.n_agents, self.input_dim()));
        for (i, (obs, mut row)) in observations.iter().zip(rows.outer_iter_mut()).enumerate() {
            check_len("agent observation", self.obs_dim, obs.len())?;
            let last = last_actions.map(|a| a[i]);
            self.write_input(obs, i, last, row.as_slice_mut().expect("contiguous row"));
        }
        Ok(rows)
    }

    pub fn q_values(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.predict_batch(inputs)
    }
}

impl Parameters for AgentNet {
    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.net.write_params(out)
    }

    fn read_params(&mut self, src: &[f64]) -> usize {
        self.net.read_params(src)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy joint action: each agent independently explores uniformly
/// with probability `epsilon`, otherwise acts greedily on its own Q-values.
pub fn select_actions(
    agent: &AgentNet,
    observations: &[Vec<f64>],
    last_actions: Option<&[usize]>,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<JointAction> {
    let q = agent.q_values(agent.inputs(observations, last_actions)?.view())?;
    let actions = q
        .outer_iter()
        .map(|row| {
            let idx = if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                rng.random_range(0..agent.n_actions)
            } else {
                argmax(row.as_slice().expect("contiguous row"))
            };
            Action::from_index(idx).expect("action index in range")
        })
        .collect();
    Ok(JointAction(actions))
}
