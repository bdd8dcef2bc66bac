use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::agent::{argmax, AgentNet};
use super::mixer::{Mixer, MixerKind};
use super::replay::StoredEpisode;
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::incentive::{combined_reward, IncentiveMode, TransitionContext};
use crate::memory::EpisodicBuffer;
use crate::numerics::{adam_step, clip_grad_norm, AdamState, Parameters, DEFAULT_LR};
use crate::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_finish: f64,
    /// Environment steps over which epsilon anneals linearly.
    pub eps_anneal: usize,
    /// Gradient steps between target-network syncs.
    pub target_interval: usize,
    pub n_circle: usize,
    pub batch_episodes: usize,
    pub replay_capacity: usize,
    /// Scale on the intrinsic reward `r^c`.
    pub beta_c: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub agent_hidden: usize,
    pub mixer: MixerKind,
    pub mixer_hidden: usize,
    /// Floor the episodic incentive at zero.
    pub clamp_incentive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            eps_start: 1.0,
            eps_finish: 0.05,
            eps_anneal: 200_000,
            target_interval: 200,
            n_circle: 1,
            batch_episodes: 32,
            replay_capacity: 5000,
            beta_c: 0.0,
            lr: DEFAULT_LR,
            grad_clip: 10.0,
            agent_hidden: 64,
            mixer: MixerKind::Vdn,
            mixer_hidden: 32,
            clamp_incentive: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.eps_finish) || !(self.eps_finish..=1.0).contains(&self.eps_start) {
            return bad("need 0 <= eps_finish <= eps_start <= 1");
        }
        if self.batch_episodes == 0 || self.replay_capacity < self.batch_episodes {
            return bad("need 1 <= batch_episodes <= replay_capacity");
        }
        if self.target_interval == 0 || self.agent_hidden == 0 || self.mixer_hidden == 0 {
            return bad("target interval and hidden widths must be positive");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return bad("learning rate and gradient clip must be positive");
        }
        Ok(())
    }

    /// Linear annealing from `eps_start` to `eps_finish`.
    pub fn epsilon(&self, env_steps: usize) -> f64 {
        if env_steps >= self.eps_anneal {
            return self.eps_finish;
        }
        let frac = (env_steps as f64 / self.eps_anneal as f64).min(1.0);
        self.eps_start + frac * (self.eps_finish - self.eps_start)
    }
}

/// Episodic memory made available to the loss.
pub struct MemoryAccess<'a> {
    pub buffer: &'a mut EpisodicBuffer,
    pub embedder: &'a Embedder,
    pub delta: f64,
}

/// Summary of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub transitions: usize,
    /// Mean target bonus contributed by the incentive (excluding `r^c`).
    pub mean_bonus: f64,
    /// Smallest bonus observed in the batch.
    pub min_bonus: f64,
    /// Per transition: online greedy next action per agent (double-Q choice).
    pub bootstrap_actions: Vec<Vec<usize>>,
    /// Per transition: bonus added to the target and whether the recalled
    /// memory (if any) was desirable.
    pub bonuses: Vec<(f64, Option<bool>)>,
}

/// Online and target networks with their optimizer.
#[derive(Clone, Debug)]
pub struct QLearner {
    pub agent: AgentNet,
    pub mixer: Mixer,
    pub target_agent: AgentNet,
    pub target_mixer: Mixer,
    pub config: TrainConfig,
    adam: AdamState,
    train_steps: u64,
}

impl QLearner {
    pub fn new(
        obs_dim: usize,
        state_dim: usize,
        n_agents: usize,
        n_actions: usize,
        config: TrainConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let agent = AgentNet::new(obs_dim, n_agents, n_actions, config.agent_hidden, rng);
        let mixer = Mixer::new(config.mixer, state_dim + 1, n_agents, config.mixer_hidden, rng);
        let adam = AdamState::new(agent.param_count() + mixer.param_count(), config.lr);
        Ok(Self {
            target_agent: agent.clone(),
            target_mixer: mixer.clone(),
            agent,
            mixer,
            config,
            adam,
            train_steps: 0,
        })
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.agent.params_vec();
        self.mixer.write_params(&mut p);
        p
    }

    pub fn target_params(&self) -> Vec<f64> {
        let mut p = self.target_agent.params_vec();
        self.target_mixer.write_params(&mut p);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let n = self.agent.read_params(params);
        self.mixer.read_params(&params[n..]);
    }

    pub fn sync_targets(&mut self) {
        self.target_agent = self.agent.clone();
        self.target_mixer = self.mixer.clone();
    }

    /// TD loss over `episodes` and its gradient w.r.t. [`Self::params`].
    ///
    /// Targets use double Q-learning: the online network picks each agent's
    /// next action, the target network (and target mixer) evaluates it.
    /// Terminal transitions drop the bootstrap. The incentive adds to the
    /// target, except conventional episodic control which adds its own
    /// squared error to the loss.
    pub fn td_loss(
        &self,
        episodes: &[&StoredEpisode],
        mode: &IncentiveMode,
        mut memory: Option<MemoryAccess<'_>>,
    ) -> Result<(BatchStats, Vec<f64>)> {
        let n = self.agent.n_agents;
        let n_actions = self.agent.n_actions;
        let gamma = self.config.gamma;
        let total: usize = episodes.iter().map(|e| e.len()).sum();
        if total == 0 {
            return Err(Error::Empty("training batch"));
        }
        let beta_c = match mode {
            IncentiveMode::E3b { beta_e3b, .. } => *beta_e3b,
            _ => self.config.beta_c,
        };
        let lambda_ec = match mode {
            IncentiveMode::ConventionalEc { lambda } => *lambda,
            _ => 0.0,
        };

        let inputs = concatenate(
            Axis(0),
            &episodes.iter().map(|e| e.agent_inputs.view()).collect::<Vec<_>>(),
        )
        .expect("agent inputs share width");
        let (q_all, tape) = self.agent.net.forward_batch(inputs.view())?;
        let q_target_all = self.target_agent.q_values(inputs.view())?;

        let mix_width = episodes[0].mix_states.ncols();
        let mut chosen = Array2::zeros((total, n));
        let mut target_chosen = Array2::zeros((total, n));
        let mut s_rows = Array2::zeros((total, mix_width));
        let mut s_next_rows = Array2::zeros((total, mix_width));
        let mut chosen_rows = Vec::with_capacity(total * n);
        let mut bootstrap_actions = Vec::with_capacity(total);
        let mut j = 0;
        let mut offset = 0;
        for e in episodes {
            for t in 0..e.len() {
                let mut boot = Vec::with_capacity(n);
                for i in 0..n {
                    let row = offset + t * n + i;
                    let a = e.actions[t * n + i];
                    chosen[[j, i]] = q_all[[row, a]];
                    chosen_rows.push((row, a));
                    let next_row = row + n;
                    let q_next = q_all.row(next_row);
                    let a_next = argmax(q_next.as_slice().expect("contiguous row"));
                    target_chosen[[j, i]] = q_target_all[[next_row, a_next]];
                    boot.push(a_next);
                }
                bootstrap_actions.push(boot);
                s_rows.row_mut(j).assign(&e.mix_states.row(t));
                s_next_rows.row_mut(j).assign(&e.mix_states.row(t + 1));
                j += 1;
            }
            offset += (e.len() + 1) * n;
        }

        let (q_tot, mix_tape) = self.mixer.forward(chosen.view(), s_rows.view())?;
        let q_next = self.target_mixer.mix(target_chosen.view(), s_next_rows.view())?;

        let mut grad_tot = Array1::zeros(total);
        let mut loss = 0.0;
        let mut bonus_sum = 0.0;
        let mut min_bonus = f64::INFINITY;
        let mut bonuses = Vec::with_capacity(total);
        let scale = 1.0 / total as f64;
        let mut j = 0;
        for e in episodes {
            let keys = match &memory {
                Some(_) if mode.uses_memory() => e.cached_keys(),
                _ => None,
            };
            for t in 0..e.len() {
                let terminal = e.terminal[t];
                let recall = match (&mut memory, keys) {
                    (Some(m), Some(k)) if !terminal => {
                        let key = k.row(t + 1);
                        m.buffer.recall_key(key.as_slice().expect("contiguous key"), m.delta)
                    }
                    _ => None,
                };
                let ctx = TransitionContext {
                    gamma,
                    recall: recall.as_ref(),
                    target_max: q_next[j],
                    q_sa: q_tot[j],
                    intrinsic: e.intrinsic[t],
                    beta_c,
                    terminal,
                    clamp: self.config.clamp_incentive,
                };
                let reward = e.rewards[t];
                let aug = combined_reward(reward, mode, &ctx)?;
                let incentive_bonus = aug.target_bonus - beta_c * e.intrinsic[t];
                bonus_sum += incentive_bonus;
                min_bonus = min_bonus.min(incentive_bonus);
                bonuses.push((incentive_bonus, recall.map(|r| r.xi)));
                let bootstrap = if terminal { 0.0 } else { gamma * q_next[j] };
                let target = reward + aug.target_bonus + bootstrap;
                let td = target - q_tot[j];
                let mut g = -2.0 * td;
                loss += td * td;
                if let Some(q_ec) = aug.ec_target {
                    let gap = q_ec - q_tot[j];
                    loss += lambda_ec * gap * gap;
                    g -= 2.0 * lambda_ec * gap;
                }
                grad_tot[j] = g * scale;
                j += 1;
            }
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("TD loss"));
        }

        let (mixer_grads, grad_chosen) = self.mixer.backward(&mix_tape, chosen.view(), grad_tot.view())?;
        let mut grad_q = Array2::zeros((inputs.nrows(), n_actions));
        for (k, &(row, a)) in chosen_rows.iter().enumerate() {
            grad_q[[row, a]] += grad_chosen[[k / n, k % n]];
        }
        let (agent_grads, _) = self.agent.net.backward(&tape, grad_q.view())?;
        let mut grads = agent_grads.to_flat();
        grads.extend(mixer_grads);

        Ok((
            BatchStats {
                loss,
                transitions: total,
                mean_bonus: bonus_sum * scale,
                min_bonus,
                bootstrap_actions,
                bonuses,
            },
            grads,
        ))
    }

    /// One clipped Adam step on the TD loss; syncs target networks every
    /// `target_interval` steps.
    pub fn train_step(
        &mut self,
        episodes: &[&StoredEpisode],
        mode: &IncentiveMode,
        memory: Option<MemoryAccess<'_>>,
    ) -> Result<BatchStats> {
        let (stats, mut grads) = self.td_loss(episodes, mode, memory)?;
        clip_grad_norm(&mut grads, self.config.grad_clip);
        let mut params = self.params();
        adam_step(&mut params, &grads, &mut self.adam)?;
        self.set_params(&params);
        self.train_steps += 1;
        if self.train_steps % self.config.target_interval as u64 == 0 {
            self.sync_targets();
        }
        Ok(stats)
    }

    /// `Q_tot` of the greedy joint action for each row of agent inputs laid
    /// out `(t, agent)`.
    pub fn greedy_value(&self, agent_inputs: ArrayView2<f64>, mix_states: ArrayView2<f64>) -> Result<Array1<f64>> {
        let n = self.agent.n_agents;
        let q = self.agent.q_values(agent_inputs)?;
        let rows = q.nrows() / n;
        let best = Array2::from_shape_fn((rows, n), |(t, i)| {
            q.row(t * n + i).iter().copied().fold(f64::NEG_INFINITY, f64::max)
        });
        self.mixer.mix(best.view(), mix_states)
    }
}
