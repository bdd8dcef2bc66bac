use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::agent::{select_actions, AgentNet};
use super::learner::{MemoryAccess, QLearner, TrainConfig};
use super::replay::{ReplayBuffer, StoredEpisode};
use crate::embedding::{train_embedder, EmbeddingConfig, Embedder};
use crate::env::{label_desirability, Environment, Trajectory};
use crate::error::{Error, Result};
use crate::incentive::{e3b_bonus, E3bState, IncentiveMode};
use crate::memory::{DeltaPolicy, EpisodicBuffer};
use crate::{seeded_rng, Rng};

/// Everything one seeded training run needs besides the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub embedding: EmbeddingConfig,
    pub incentive: IncentiveMode,
    pub delta: DeltaPolicy,
    pub memory_capacity: usize,
    /// Return at or above which an episode counts as desirable (and as a win
    /// during evaluation). Defaults to the environment's maximum return.
    pub r_thr: Option<f64>,
    /// Environment steps to train for.
    pub t_max: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            embedding: EmbeddingConfig::default(),
            incentive: IncentiveMode::EpisodicIncentive,
            delta: DeltaPolicy::Auto,
            memory_capacity: 100_000,
            r_thr: None,
            t_max: 200_000,
            eval_interval: 2000,
            eval_episodes: 30,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.embedding.validate()?;
        self.incentive.validate()?;
        if let DeltaPolicy::Fixed(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidConfig("delta must be positive".into()));
            }
        }
        if self.memory_capacity == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::InvalidConfig(
                "memory capacity, eval interval and eval episodes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn resolved_delta(&self) -> f64 {
        self.delta.resolve(self.memory_capacity, self.embedding.embed_dim)
    }
}

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Nominal step of the evaluation grid.
    pub env_steps: usize,
    pub test_win_rate: f64,
    pub mean_test_return: f64,
    /// Mean incentive bonus over the training steps since the previous point.
    pub mean_rp: f64,
    pub buffer_size: usize,
    /// Mean loss of the most recent embedder training phase.
    pub embedder_loss: Option<f64>,
    pub wall_clock_s: f64,
}

/// Greedy policy saved at the end of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub agent: AgentNet,
    pub env_steps: usize,
    pub r_thr: f64,
}

pub struct RunOutcome {
    pub points: Vec<EvalPoint>,
    pub learner: QLearner,
    pub embedder: Embedder,
    pub memory: EpisodicBuffer,
    pub env_steps: usize,
    pub r_thr: f64,
}

impl RunOutcome {
    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            agent: self.learner.agent.clone(),
            env_steps: self.env_steps,
            r_thr: self.r_thr,
        }
    }
}

/// Plays one episode. With `bonus`, every transition is paid the elliptical
/// novelty of the embedded next state, with the covariance reset first.
pub fn rollout<E: Environment>(
    env: &E,
    agent: &AgentNet,
    epsilon: f64,
    mut bonus: Option<(&Embedder, &mut E3bState, f64)>,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let (mut state, mut obs) = env.reset(rng);
    let mut states = vec![env.state_vector(&state)];
    let mut transitions = Vec::new();
    let mut intrinsic = Vec::new();
    let mut last: Option<Vec<usize>> = None;
    if let Some((_, cov, lambda)) = bonus.as_mut() {
        cov.reset(*lambda);
    }
    let t_max = env.t_max() as f64;
    while !state.terminal {
        let action = select_actions(agent, &obs, last.as_deref(), epsilon, rng)?;
        let tr = env.step(&state, &action)?;
        let next_vec = env.state_vector(&tr.next_state);
        let b = match bonus.as_mut() {
            Some((embedder, cov, _)) => {
                let phi = embedder.embed(&next_vec, tr.next_state.t as f64 / t_max)?;
                e3b_bonus(&phi, cov)
            }
            None => 0.0,
        };
        intrinsic.push(b);
        states.push(next_vec);
        last = Some(action.indices());
        state = tr.next_state.clone();
        obs = tr.next_observations.clone();
        transitions.push(tr);
    }
    Ok(Trajectory {
        transitions,
        states,
        intrinsic,
        t_max: env.t_max(),
    })
}

/// Greedy evaluation: returns (win rate, mean return), where a win is an
/// episode whose return reaches `r_thr`.
pub fn evaluate<E: Environment>(
    env: &E,
    agent: &AgentNet,
    episodes: usize,
    r_thr: f64,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::InvalidConfig("need at least one evaluation episode".into()));
    }
    let mut wins = 0usize;
    let mut total = 0.0;
    for _ in 0..episodes {
        let traj = rollout(env, agent, 0.0, None, rng)?;
        let ret = traj.episode_return();
        if ret >= r_thr {
            wins += 1;
        }
        total += ret;
    }
    Ok((wins as f64 / episodes as f64, total / episodes as f64))
}

/// Runs the training loop for `config.t_max` environment steps.
///
/// Each iteration plays one epsilon-greedy episode, writes it into episodic
/// memory, stores it for replay and takes `n_circle` gradient steps once
/// enough episodes are stored. Every `t_emb` steps the embedder is retrained
/// and every memory re-keyed. Evaluation happens at every multiple of
/// `eval_interval` (including 0) and at `t_max`; `on_eval` sees each point as
/// it is produced.
pub fn train_run<E: Environment>(
    env: &E,
    config: &RunConfig,
    seed: u64,
    mut on_eval: impl FnMut(&EvalPoint),
) -> Result<RunOutcome> {
    config.validate()?;
    let start = Instant::now();
    let mut rng = seeded_rng(seed);
    let mut eval_rng = seeded_rng(seed ^ 0x5EED_E7A1);
    let tc = &config.train;
    let mode = config.incentive;
    let uses_memory = mode.uses_memory();
    let r_thr = config.r_thr.unwrap_or_else(|| env.max_return());
    let delta = config.resolved_delta();

    let mut learner = QLearner::new(
        env.obs_dim(),
        env.state_dim(),
        env.n_agents(),
        env.n_actions(),
        tc.clone(),
        &mut rng,
    )?;
    let mut embedder = Embedder::new(env.state_dim(), config.embedding.clone(), &mut rng)?;
    let mut memory = EpisodicBuffer::new(config.memory_capacity, config.embedding.embed_dim, delta)?;
    let mut replay = ReplayBuffer::new(tc.replay_capacity);
    let mut e3b = match mode {
        IncentiveMode::E3b { lambda_e3b, .. } => Some((E3bState::new(config.embedding.embed_dim, lambda_e3b), lambda_e3b)),
        _ => None,
    };

    let mut points = Vec::new();
    let mut env_steps = 0usize;
    let mut next_eval = 0usize;
    let mut next_embed = config.embedding.t_emb;
    let mut bonus_sum = 0.0;
    let mut bonus_count = 0usize;
    let mut embedder_loss = None;

    let mut emit = |points: &mut Vec<EvalPoint>,
                    nominal: usize,
                    learner: &QLearner,
                    memory_len: usize,
                    bonus: f64,
                    loss: Option<f64>,
                    rng: &mut Rng|
     -> Result<()> {
        let (win, ret) = evaluate(env, &learner.agent, config.eval_episodes, r_thr, rng)?;
        let point = EvalPoint {
            env_steps: nominal,
            test_win_rate: win,
            mean_test_return: ret,
            mean_rp: bonus,
            buffer_size: memory_len,
            embedder_loss: loss,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        on_eval(&point);
        points.push(point);
        Ok(())
    };

    while env_steps < config.t_max {
        if env_steps >= next_eval {
            let mean = if bonus_count > 0 { bonus_sum / bonus_count as f64 } else { 0.0 };
            emit(&mut points, next_eval, &learner, memory.len(), mean, embedder_loss, &mut eval_rng)?;
            bonus_sum = 0.0;
            bonus_count = 0;
            next_eval += config.eval_interval;
        }

        let epsilon = tc.epsilon(env_steps);
        let bonus = e3b.as_mut().map(|(cov, lambda)| (&embedder, cov, *lambda));
        let traj = rollout(env, &learner.agent, epsilon, bonus, &mut rng)?;
        env_steps += traj.len();

        if uses_memory {
            let desirable = label_desirability(&traj, r_thr);
            memory.construct_from_trajectory(&traj, desirable, delta, tc.gamma, &embedder)?;
        }
        replay.push(StoredEpisode::from_trajectory(&traj, &learner.agent)?);

        if replay.can_sample(tc.batch_episodes) {
            for _ in 0..tc.n_circle {
                let picks = replay.sample_indices(tc.batch_episodes, &mut rng);
                if uses_memory {
                    for &i in &picks {
                        replay.get_mut(i).keys(&embedder)?;
                    }
                }
                let batch: Vec<&StoredEpisode> = picks.iter().map(|&i| replay.get(i)).collect();
                let access = uses_memory.then(|| MemoryAccess {
                    buffer: &mut memory,
                    embedder: &embedder,
                    delta,
                });
                let stats = learner.train_step(&batch, &mode, access).map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::Invariant(format!("{what} became non-finite at env step {env_steps}"))
                    }
                    other => other,
                })?;
                bonus_sum += stats.mean_bonus;
                bonus_count += 1;
            }
        }

        if uses_memory && embedder.is_trainable() && env_steps >= next_embed {
            let losses = train_embedder(&mut embedder, &memory, &mut rng)?;
            if !losses.is_empty() {
                embedder_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
                memory.rekey_all(&embedder)?;
            }
            while next_embed <= env_steps {
                next_embed += config.embedding.t_emb;
            }
        }
    }

    if config.t_max > 0 {
        // catch up on grid points skipped by a long final episode
        while next_eval < config.t_max {
            let mean = if bonus_count > 0 { bonus_sum / bonus_count as f64 } else { 0.0 };
            emit(&mut points, next_eval, &learner, memory.len(), mean, embedder_loss, &mut eval_rng)?;
            bonus_sum = 0.0;
            bonus_count = 0;
            next_eval += config.eval_interval;
        }
        let mean = if bonus_count > 0 { bonus_sum / bonus_count as f64 } else { 0.0 };
        emit(&mut points, config.t_max, &learner, memory.len(), mean, embedder_loss, &mut eval_rng)?;
    }

    Ok(RunOutcome {
        points,
        learner,
        embedder,
        memory,
        env_steps,
        r_thr,
    })
}
