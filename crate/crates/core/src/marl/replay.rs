use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::index;

use super::agent::AgentNet;
use crate::embedding::Embedder;
use crate::env::Trajectory;
use crate::error::{check_len, Result};
use crate::Rng;

/// An episode laid out for batched training.
///
/// Rows of `agent_inputs` are ordered `(t, agent)` over the states
/// `s_0 ..= s_T`; the remaining per-step vectors are indexed by transition.
#[derive(Clone, Debug)]
pub struct StoredEpisode {
    pub n_agents: usize,
    pub agent_inputs: Array2<f64>,
    /// `T x n_agents`, row-major.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
    pub intrinsic: Vec<f64>,
    /// Mixer conditioning per state: global state plus normalized time.
    pub mix_states: Array2<f64>,
    /// Global state per visited state.
    pub states: Array2<f64>,
    pub times: Vec<f64>,
    key_cache: Option<(u64, Array2<f64>)>,
}

impl StoredEpisode {
    pub fn from_trajectory(trajectory: &Trajectory, agent: &AgentNet) -> Result<Self> {
        let steps = trajectory.len();
        let n = agent.n_agents;
        check_len("trajectory states", steps + 1, trajectory.states.len())?;
        let state_dim = trajectory.states.first().map_or(0, Vec::len);
        let mut agent_inputs = Array2::zeros(((steps + 1) * n, agent.input_dim()));
        let mut actions = Vec::with_capacity(steps * n);
        let mut last: Option<Vec<usize>> = None;
        for t in 0..=steps {
            let obs = if t < steps {
                &trajectory.transitions[t].observations
            } else {
                &trajectory.transitions[steps - 1].next_observations
            };
            check_len("episode observations", n, obs.len())?;
            for i in 0..n {
                let mut row = agent_inputs.row_mut(t * n + i);
                let prev = last.as_ref().map(|l| l[i]);
                agent.write_input(&obs[i], i, prev, row.as_slice_mut().expect("contiguous row"));
            }
            if t < steps {
                let a = trajectory.transitions[t].action.indices();
                actions.extend_from_slice(&a);
                last = Some(a);
            }
        }
        let mut mix_states = Array2::zeros((steps + 1, state_dim + 1));
        let mut states = Array2::zeros((steps + 1, state_dim));
        let mut times = Vec::with_capacity(steps + 1);
        for (t, s) in trajectory.states.iter().enumerate() {
            let time = trajectory.time_feature(t);
            for (j, &v) in s.iter().enumerate() {
                mix_states[[t, j]] = v;
                states[[t, j]] = v;
            }
            mix_states[[t, state_dim]] = time;
            times.push(time);
        }
        Ok(Self {
            n_agents: n,
            agent_inputs,
            actions,
            rewards: trajectory.transitions.iter().map(|t| t.reward).collect(),
            terminal: trajectory.transitions.iter().map(|t| t.terminal).collect(),
            intrinsic: trajectory.intrinsic.clone(),
            mix_states,
            states,
            times,
            key_cache: None,
        })
    }

    /// Builds an episode from pre-laid-out parts; `mix_states` has one row
    /// per visited state and its last column is the normalized time.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        n_agents: usize,
        agent_inputs: Array2<f64>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        terminal: Vec<bool>,
        intrinsic: Vec<f64>,
        mix_states: Array2<f64>,
    ) -> Result<Self> {
        let steps = rewards.len();
        check_len("episode agent inputs", (steps + 1) * n_agents, agent_inputs.nrows())?;
        check_len("episode actions", steps * n_agents, actions.len())?;
        check_len("episode terminal flags", steps, terminal.len())?;
        check_len("episode intrinsic rewards", steps, intrinsic.len())?;
        check_len("episode mixer states", steps + 1, mix_states.nrows())?;
        let width = mix_states.ncols().saturating_sub(1);
        let states = mix_states.slice(ndarray::s![.., ..width]).to_owned();
        let times = mix_states.column(width).to_vec();
        Ok(Self {
            n_agents,
            agent_inputs,
            actions,
            rewards,
            terminal,
            intrinsic,
            mix_states,
            states,
            times,
            key_cache: None,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Memory keys of every visited state under `embedder`, recomputed only
    /// when the embedder has changed since the last call.
    pub fn keys(&mut self, embedder: &Embedder) -> Result<&Array2<f64>> {
        let fresh = matches!(&self.key_cache, Some((v, _)) if *v == embedder.version());
        if !fresh {
            let keys = embedder.embed_batch(self.states.view(), &self.times)?;
            self.key_cache = Some((embedder.version(), keys));
        }
        Ok(&self.key_cache.as_ref().expect("cache filled").1)
    }

    pub fn cached_keys(&self) -> Option<&Array2<f64>> {
        self.key_cache.as_ref().map(|(_, k)| k)
    }
}

/// FIFO store of whole episodes with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    episodes: VecDeque<StoredEpisode>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::with_capacity(capacity.min(1024)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn push(&mut self, episode: StoredEpisode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn can_sample(&self, batch: usize) -> bool {
        self.episodes.len() >= batch
    }

    /// `batch` distinct episode indices, uniformly at random.
    pub fn sample_indices(&self, batch: usize, rng: &mut Rng) -> Vec<usize> {
        index::sample(rng, self.episodes.len(), batch.min(self.episodes.len())).into_vec()
    }

    pub fn get(&self, i: usize) -> &StoredEpisode {
        &self.episodes[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut StoredEpisode {
        &mut self.episodes[i]
    }
}
