//! Reference models and randomized scenarios shared by the property suites
//! and the acceptance runner. Scenarios panic on the first disagreement.
#![allow(dead_code)]

use emu_core::embedding::{train_embedder, EmbedMode, EmbedSample, Embedder, EmbedderParams, EmbeddingConfig};
use emu_core::env::{Action, EnvState, JointAction, Trajectory, Transition};
use emu_core::incentive::{combined_reward, e3b_bonus, E3bState, IncentiveMode, TransitionContext};
use emu_core::marl::{MemoryAccess, MixerKind, QLearner, StoredEpisode, TrainConfig};
use emu_core::memory::{EpisodicBuffer, EpisodicRecord};
use emu_core::numerics::{finite_difference, max_relative_error, Parameters};
use emu_core::{seeded_rng, Rng};
use ndarray::{Array1, Array2};
use rand::Rng as _;

pub fn identity_embedder(dim: usize) -> Embedder {
    let cfg = EmbeddingConfig {
        mode: EmbedMode::Random,
        embed_dim: dim,
        ..EmbeddingConfig::default()
    };
    Embedder::from_params(EmbedderParams::Random { projection: Array2::eye(dim) }, dim, cfg)
}

pub fn trajectory(states: Vec<Vec<f64>>, rewards: &[f64]) -> Trajectory {
    let dummy = EnvState {
        positions: vec![(0, 0)],
        t: 0,
        terminal: false,
    };
    let transitions = rewards
        .iter()
        .map(|&r| Transition {
            state: dummy.clone(),
            action: JointAction(vec![Action::Stay]),
            reward: r,
            next_state: dummy.clone(),
            terminal: false,
            observations: vec![],
            next_observations: vec![],
        })
        .collect();
    Trajectory {
        transitions,
        states,
        intrinsic: vec![0.0; rewards.len()],
        t_max: 10,
    }
}

/// Keys clustered on a coarse lattice so that both matches and misses occur.
pub fn lattice_key(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.random_range(0..4) as f64 * 0.5 + rng.random_range(-0.02..0.02))
        .collect()
}

/// A random episode ending in a win (`desirable`) or a penalty.
pub fn random_episode(rng: &mut Rng, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>, bool) {
    let len = rng.random_range(1..10);
    let states: Vec<Vec<f64>> = (0..=len).map(|_| lattice_key(rng, dim)).collect();
    let desirable = rng.random_bool(0.4);
    let mut rewards = vec![0.0; len];
    rewards[len - 1] = if desirable { 10.0 } else { -2.0 };
    (states, rewards, desirable)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelRecord {
    pub id: u64,
    pub x: Vec<f64>,
    pub h: f64,
    pub xi: bool,
    pub n_call: u64,
    pub n_xi: u64,
    pub last: u64,
}

/// Episodic buffer replayed with linear scans and explicit LRU stamps.
pub struct Model {
    pub records: Vec<ModelRecord>,
    capacity: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    clock: u64,
    next_id: u64,
}

impl Model {
    pub fn new(capacity: usize, mean: Vec<f64>, std: Vec<f64>) -> Self {
        Self {
            records: Vec::new(),
            capacity,
            mean,
            std,
            clock: 0,
            next_id: 0,
        }
    }

    pub fn norm(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(d, v)| (v - self.mean[d]) / self.std[d])
            .collect()
    }

    fn nearest(&self, x: &[f64], delta: f64) -> Option<usize> {
        let y = self.norm(x);
        let mut best: Option<(f64, u64, usize)> = None;
        for (i, r) in self.records.iter().enumerate() {
            let ry = self.norm(&r.x);
            let d: f64 = ry.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if d >= delta {
                continue;
            }
            if best.map_or(true, |(bd, bid, _)| d < bd || (d == bd && r.id < bid)) {
                best = Some((d, r.id, i));
            }
        }
        best.map(|(_, _, i)| i)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn insert(&mut self, x: Vec<f64>, h: f64, xi: bool) {
        let last = self.tick();
        self.records.push(ModelRecord {
            id: self.next_id,
            x,
            h,
            xi,
            n_call: 1,
            n_xi: u64::from(xi),
            last,
        });
        self.next_id += 1;
        while self.records.len() > self.capacity {
            let oldest = (0..self.records.len()).min_by_key(|&i| self.records[i].last).unwrap();
            self.records.remove(oldest);
        }
    }

    pub fn ec_update(&mut self, x: &[f64], ret: f64, delta: f64) {
        match self.nearest(x, delta) {
            Some(i) => {
                let stamp = self.tick();
                let r = &mut self.records[i];
                r.last = stamp;
                r.n_call += 1;
                r.h = r.h.max(ret);
            }
            None => self.insert(x.to_vec(), ret, false),
        }
    }

    pub fn construct(&mut self, states: &[Vec<f64>], rewards: &[f64], desirable: bool, delta: f64, gamma: f64) {
        let mut ret = 0.0;
        for t in (0..rewards.len()).rev() {
            ret = rewards[t] + gamma * ret;
            let x = &states[t];
            match self.nearest(x, delta) {
                Some(i) => {
                    let stamp = self.tick();
                    let r = &mut self.records[i];
                    r.last = stamp;
                    r.n_call += 1;
                    if desirable {
                        r.n_xi += 1;
                    }
                    if desirable && !r.xi {
                        r.xi = true;
                        r.x = x.clone();
                        r.h = ret;
                    } else {
                        r.h = r.h.max(ret);
                    }
                }
                None => self.insert(x.clone(), ret, desirable),
            }
        }
    }

    pub fn recall(&mut self, x: &[f64], delta: f64) -> Option<ModelRecord> {
        let i = self.nearest(x, delta)?;
        let stamp = self.tick();
        self.records[i].last = stamp;
        Some(self.records[i].clone())
    }
}

pub struct Instance {
    pub rng: Rng,
    pub dim: usize,
    pub capacity: usize,
    pub delta: f64,
    pub buffer: EpisodicBuffer,
    pub model: Model,
}

/// A small buffer with random capacity, threshold and key statistics, plus
/// its reference model.
pub fn instance(seed: u64) -> Instance {
    let mut rng = seeded_rng(seed);
    let dim = rng.random_range(1..=4);
    let capacity = rng.random_range(3..=25);
    let delta = rng.random_range(0.05..0.6);
    let mean: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let std: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut buffer = EpisodicBuffer::new(capacity, dim, delta).unwrap();
    buffer.set_stats(mean.clone(), std.clone()).unwrap();
    Instance {
        model: Model::new(capacity, mean, std),
        rng,
        dim,
        capacity,
        delta,
        buffer,
    }
}

pub fn assert_same(buffer: &EpisodicBuffer, model: &Model) {
    let mut got: Vec<&EpisodicRecord> = buffer.records().iter().collect();
    got.sort_by_key(|r| r.id);
    assert_eq!(got.len(), model.records.len(), "record count");
    for (g, m) in got.iter().zip(&model.records) {
        assert_eq!(g.id, m.id);
        assert_eq!(g.x, m.x, "key of record {}", m.id);
        assert_eq!(g.h, m.h, "return of record {}", m.id);
        assert_eq!((g.xi, g.n_call, g.n_xi), (m.xi, m.n_call, m.n_xi), "flags of record {}", m.id);
        assert_eq!(g.last_recalled, m.last, "recency of record {}", m.id);
        for (a, b) in g.y.iter().zip(model.norm(&m.x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Indexed and linear-scan lookups against an independent brute force.
pub fn nearest_neighbour_scenario(seed: u64) {
    let mut rng = seeded_rng(seed);
    let dim = rng.random_range(1..=3);
    let delta = rng.random_range(0.02..0.5);
    let mut buffer = EpisodicBuffer::new(1000, dim, delta).unwrap();
    for _ in 0..rng.random_range(0..200) {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        buffer.ec_update(&x, &x, 0.0, 0.0, 1e-9).unwrap();
    }
    for _ in 0..20 {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.6..1.6)).collect();
        let y = buffer.normalize(&q);
        let brute = buffer
            .records()
            .iter()
            .enumerate()
            .map(|(slot, r)| {
                let d = r.y.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                (d, r.id, slot)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nn = buffer.nearest_neighbor(&y);
        assert_eq!(nn.map(|(s, _)| s), brute.map(|b| b.2));
        if let (Some((_, d)), Some(b)) = (nn, brute) {
            assert!((d - b.0).abs() < 1e-12);
        }
        let within = buffer.nearest_within(&y, delta).map(|(s, _)| s);
        assert_eq!(within, brute.filter(|b| b.0 < delta).map(|b| b.2));
    }
}

pub fn ec_update_scenario(seed: u64) {
    let mut inst = instance(seed);
    for _ in 0..inst.rng.random_range(1..60) {
        let x = lattice_key(&mut inst.rng, inst.dim);
        let ret = inst.rng.random_range(-2.0..10.0);
        inst.buffer.ec_update(&x, &x, 0.0, ret, inst.delta).unwrap();
        inst.model.ec_update(&x, ret, inst.delta);
    }
    assert_same(&inst.buffer, &inst.model);
}

pub fn construction_scenario(seed: u64) {
    let mut inst = instance(seed);
    let embedder = identity_embedder(inst.dim);
    for _ in 0..inst.rng.random_range(1..8) {
        let (states, rewards, desirable) = random_episode(&mut inst.rng, inst.dim);
        let traj = trajectory(states.clone(), &rewards);
        inst.buffer.construct_from_trajectory(&traj, desirable, inst.delta, 0.9, &embedder).unwrap();
        inst.model.construct(&states, &rewards, desirable, inst.delta, 0.9);
        assert_same(&inst.buffer, &inst.model);
    }
}

/// Interleaved recalls and updates on a small buffer; eviction order must
/// follow the model's recency stamps.
pub fn eviction_scenario(seed: u64) {
    let mut inst = instance(seed);
    for _ in 0..inst.rng.random_range(1..80) {
        let x = lattice_key(&mut inst.rng, inst.dim);
        if inst.rng.random_bool(0.5) {
            let got = inst.buffer.recall_key(&x, inst.delta);
            let want = inst.model.recall(&x, inst.delta);
            assert_eq!(got.map(|r| (r.h, r.n_call)), want.map(|r| (r.h, r.n_call)));
        } else {
            let ret = inst.rng.random_range(-2.0..10.0);
            inst.buffer.ec_update(&x, &x, 0.0, ret, inst.delta).unwrap();
            inst.model.ec_update(&x, ret, inst.delta);
        }
        assert!(inst.buffer.len() <= inst.capacity);
    }
    inst.buffer.evict_if_full();
    assert_same(&inst.buffer, &inst.model);
}

/// Counter, desirability and return monotonicity across constructions.
pub fn bookkeeping_scenario(seed: u64) {
    let mut inst = instance(seed);
    let embedder = identity_embedder(inst.dim);
    let mut previous: Vec<EpisodicRecord> = Vec::new();
    for _ in 0..inst.rng.random_range(1..10) {
        let (states, rewards, desirable) = random_episode(&mut inst.rng, inst.dim);
        inst.buffer
            .construct_from_trajectory(&trajectory(states, &rewards), desirable, inst.delta, 0.99, &embedder)
            .unwrap();
        for r in inst.buffer.records() {
            assert!(r.n_xi <= r.n_call);
            assert!(r.h.is_finite());
            if let Some(old) = previous.iter().find(|o| o.id == r.id) {
                assert!(r.xi || !old.xi, "desirability never reverts");
                if old.xi == r.xi {
                    assert!(r.h >= old.h, "return only rises between shifts");
                }
            }
        }
        previous = inst.buffer.records().to_vec();
    }
}

/// Draws random buffers and transitions; returns how many draws paid a
/// positive incentive. Panics if a bonus is paid without a desirable memory
/// or leaves `[0, gamma * max(0, H - target_max)]`.
pub fn selectivity_draws(draws: usize, seed: u64) -> usize {
    let mut rng = seeded_rng(seed);
    let embedder = identity_embedder(2);
    let gamma = 0.99;
    let mut done = 0;
    let mut paid = 0;
    while done < draws {
        let mut buffer = EpisodicBuffer::new(200, 2, 0.3).unwrap();
        for _ in 0..rng.random_range(1..15) {
            let len = rng.random_range(1..8);
            let states: Vec<Vec<f64>> = (0..=len)
                .map(|_| vec![rng.random_range(0..5) as f64, rng.random_range(0..5) as f64])
                .collect();
            let desirable = rng.random_bool(0.3);
            let mut rewards = vec![0.0; len];
            rewards[len - 1] = if desirable { 10.0 } else { -2.0 };
            buffer
                .construct_from_trajectory(&trajectory(states, &rewards), desirable, 0.3, gamma, &embedder)
                .unwrap();
        }
        for _ in 0..100.min(draws - done) {
            let key = [rng.random_range(-0.5..5.5), rng.random_range(-0.5..5.5)];
            let recall = buffer.recall_key(&key, 0.3);
            let target_max = rng.random_range(-3.0..12.0);
            let clamp = rng.random_bool(0.9);
            let ctx = TransitionContext {
                gamma,
                recall: recall.as_ref(),
                target_max,
                q_sa: rng.random_range(-3.0..12.0),
                terminal: false,
                clamp,
                ..TransitionContext::default()
            };
            let rp = combined_reward(0.0, &IncentiveMode::EpisodicIncentive, &ctx).unwrap().target_bonus;
            match recall {
                None => assert_eq!(rp, 0.0, "miss"),
                Some(r) if !r.xi => assert_eq!(rp, 0.0, "undesirable memory"),
                Some(r) if clamp => {
                    let bound = gamma * (r.h - target_max).max(0.0);
                    assert!((0.0..=bound).contains(&rp), "r^p {rp} outside [0, {bound}]");
                    paid += usize::from(rp > 0.0);
                }
                Some(r) => assert!(rp.abs() <= gamma * (r.h - target_max).abs() + 1e-12),
            }
            done += 1;
        }
    }
    paid
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = Array2::eye(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
        for k in 0..n {
            a.swap([col, k], [pivot, k]);
            inv.swap([col, k], [pivot, k]);
        }
        let p = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = a[[row, col]];
                for k in 0..n {
                    a[[row, k]] -= f * a[[col, k]];
                    inv[[row, k]] -= f * inv[[col, k]];
                }
            }
        }
    }
    inv
}

/// Largest relative disagreement between the running inverse (and bonus)
/// and the explicit inverse of `lambda I + sum phi phi^T`.
pub fn e3b_max_error(sequences: usize, steps: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..sequences {
        let dim = rng.random_range(1..=6);
        let lambda = rng.random_range(0.05..2.0);
        let mut state = E3bState::new(dim, lambda);
        let mut cov: Array2<f64> = Array2::eye(dim) * lambda;
        for _ in 0..steps {
            let phi: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let phi_v = Array1::from(phi.clone());
            let expected = phi_v.dot(&inverse(&cov).dot(&phi_v));
            let bonus = e3b_bonus(&phi, &mut state);
            worst = worst.max((bonus - expected).abs() / expected.abs().max(1.0));
            for i in 0..dim {
                for j in 0..dim {
                    cov[[i, j]] += phi[i] * phi[j];
                }
            }
            for (a, b) in state.inv_cov.iter().zip(inverse(&cov).iter()) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    worst
}

pub fn tiny_learner(
    mixer: MixerKind,
    n_agents: usize,
    obs_dim: usize,
    state_dim: usize,
    n_actions: usize,
    gamma: f64,
    rng: &mut Rng,
) -> QLearner {
    let config = TrainConfig {
        gamma,
        agent_hidden: 4,
        mixer,
        mixer_hidden: 4,
        clamp_incentive: false,
        ..TrainConfig::default()
    };
    let mut learner = QLearner::new(obs_dim, state_dim, n_agents, n_actions, config, rng).unwrap();
    // distinct target parameters so the bootstrap is not a copy of the online net
    let online = learner.params();
    let perturbed: Vec<f64> = online.iter().map(|p| p + rng.random_range(-0.1..0.1)).collect();
    learner.set_params(&perturbed);
    learner.sync_targets();
    learner.set_params(&online);
    learner
}

/// A random episode over `states` with random observations and actions.
pub fn learner_episode(learner: &QLearner, states: &[Vec<f64>], rewards: &[f64], terminal_last: bool, rng: &mut Rng) -> StoredEpisode {
    let n = learner.agent.n_agents;
    let n_actions = learner.agent.n_actions;
    let obs_dim = learner.agent.obs_dim;
    let steps = rewards.len();
    let actions: Vec<usize> = (0..steps * n).map(|_| rng.random_range(0..n_actions)).collect();
    let mut inputs = Array2::zeros(((steps + 1) * n, learner.agent.input_dim()));
    for t in 0..=steps {
        for i in 0..n {
            let obs: Vec<f64> = (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let last = (t > 0).then(|| actions[(t - 1) * n + i]);
            let mut row = inputs.row_mut(t * n + i);
            learner.agent.write_input(&obs, i, last, row.as_slice_mut().unwrap());
        }
    }
    let width = states[0].len();
    let mix = Array2::from_shape_fn((steps + 1, width + 1), |(t, j)| if j < width { states[t][j] } else { t as f64 / 10.0 });
    let mut terminal = vec![false; steps];
    terminal[steps - 1] = terminal_last;
    StoredEpisode::from_parts(n, inputs, actions, rewards.to_vec(), terminal, vec![0.0; steps], mix).unwrap()
}

/// Max componentwise gradient difference between the regularized episodic
/// control loss and its reward form, over `trials` random tiny learners and
/// each of the given scales.
pub fn reward_form_max_diff(trials: usize, lambdas: &[f64], seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let state_dim = 2;
    let embedder = identity_embedder(state_dim);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mixer = if trial % 2 == 0 { MixerKind::Vdn } else { MixerKind::Mono };
        let learner = tiny_learner(mixer, 2, 3, state_dim, 3, 0.99, &mut rng);
        let mut buffer = EpisodicBuffer::new(100, state_dim, 1e-3).unwrap();
        let mut episodes = Vec::new();
        for _ in 0..3 {
            let steps = rng.random_range(1..5);
            let states: Vec<Vec<f64>> = (0..=steps)
                .map(|_| (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let rewards: Vec<f64> = (0..steps).map(|_| rng.random_range(-2.0..10.0)).collect();
            for s in &states[1..] {
                if rng.random_bool(0.7) {
                    buffer.ec_update(s, s, 0.0, rng.random_range(-2.0..10.0), 1e-3).unwrap();
                }
            }
            let terminal = rng.random_bool(0.5);
            let mut e = learner_episode(&learner, &states, &rewards, terminal, &mut rng);
            e.keys(&embedder).unwrap();
            episodes.push(e);
        }
        let batch: Vec<&StoredEpisode> = episodes.iter().collect();
        for &lambda in lambdas {
            let mut grads = Vec::new();
            for mode in [IncentiveMode::ConventionalEc { lambda }, IncentiveMode::RewardEc { lambda }] {
                let access = MemoryAccess {
                    buffer: &mut buffer,
                    embedder: &embedder,
                    delta: 1e-3,
                };
                grads.push(learner.td_loss(&batch, &mode, Some(access)).unwrap().1);
            }
            assert!(grads[0].iter().any(|g| g.abs() > 1e-6), "gradient should be informative");
            let diff = grads[0].iter().zip(&grads[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
        }
    }
    worst
}

/// Max gradient difference between the incentive-augmented loss (memory
/// holding the exact optimal values, every visit desirable) and the loss
/// that bootstraps from the optimal values directly.
///
/// Two states A and B, two actions, gamma 0.9:
///   A --0--> B (r 0)      A --1--> end (r 1)
///   B --0--> end (r 2)    B --1--> A (r 0)
/// so V*(B) = 2 and V*(A) = max(0.9 * 2, 1) = 1.8.
pub fn optimal_bootstrap_max_diff(trials: usize, seed: u64) -> f64 {
    let gamma = 0.9;
    let a = vec![1.0, 0.0];
    let b = vec![0.0, 1.0];
    let v_star = |s: &Vec<f64>| if *s == a { 1.8 } else { 2.0 };

    let embedder = identity_embedder(2);
    let mut buffer = EpisodicBuffer::new(10, 2, 0.1).unwrap();
    let best = trajectory(vec![a.clone(), b.clone(), vec![0.0, 0.0]], &[0.0, 2.0]);
    buffer.construct_from_trajectory(&best, true, 0.1, gamma, &embedder).unwrap();
    for r in buffer.records() {
        assert!(r.xi && r.n_xi == r.n_call);
        assert!((r.h - v_star(&r.state)).abs() < 1e-15, "memory holds V*");
    }

    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let learner = tiny_learner(MixerKind::Vdn, 1, 2, 2, 2, gamma, &mut rng);
        let cases = [(&a, 0usize, 0.0, &b), (&b, 1usize, 0.0, &a)];
        let mut with_incentive = Vec::new();
        let mut with_optimal = Vec::new();
        for &(s, action, r, next) in &cases {
            let input = |obs: &Vec<f64>, last: Option<usize>| {
                let mut row = vec![0.0; learner.agent.input_dim()];
                learner.agent.write_input(obs, 0, last, &mut row);
                row
            };
            let mut rows = input(s, None);
            rows.extend(input(next, Some(action)));
            let inputs = Array2::from_shape_vec((2, learner.agent.input_dim()), rows).unwrap();
            let mix = Array2::from_shape_vec((2, 3), [s.clone(), vec![0.0], next.clone(), vec![0.1]].concat()).unwrap();
            let mut e = StoredEpisode::from_parts(1, inputs.clone(), vec![action], vec![r], vec![false], vec![0.0], mix.clone()).unwrap();
            e.keys(&embedder).unwrap();
            with_incentive.push(e);
            // same transition with the optimal value folded into a terminal reward
            let folded = r + gamma * v_star(next);
            with_optimal.push(StoredEpisode::from_parts(1, inputs, vec![action], vec![folded], vec![true], vec![0.0], mix).unwrap());
        }
        let access = MemoryAccess {
            buffer: &mut buffer,
            embedder: &embedder,
            delta: 0.1,
        };
        let batch: Vec<&StoredEpisode> = with_incentive.iter().collect();
        let (stats, g_incentive) = learner.td_loss(&batch, &IncentiveMode::EpisodicIncentive, Some(access)).unwrap();
        assert!(stats.bonuses.iter().all(|&(_, xi)| xi == Some(true)), "every next state recalled as desirable");
        let batch: Vec<&StoredEpisode> = with_optimal.iter().collect();
        let (_, g_optimal) = learner.td_loss(&batch, &IncentiveMode::None, None).unwrap();
        let diff = g_incentive.iter().zip(&g_optimal).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    worst
}

/// Trains a dCAE through the periodic update on a buffer whose returns are
/// linear in the state; returns the loss on the full set before and after
/// `steps` optimizer steps.
pub fn linear_return_training(steps: usize, seed: u64) -> (f64, f64) {
    let mut rng = seeded_rng(seed);
    let state_dim = 4;
    let weights = [1.5, -2.0, 0.5, 1.0];
    let mut buffer = EpisodicBuffer::new(10_000, 4, 1e-9).unwrap();
    let mut samples = Vec::new();
    for _ in 0..512 {
        let s: Vec<f64> = (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = rng.random_range(0.0..1.0);
        let h: f64 = s.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() + 2.0;
        buffer.ec_update(&s, &s, t, h, 1e-9).unwrap();
        samples.push(EmbedSample { state: s, ret: h, t });
    }
    assert_eq!(buffer.len(), 512);
    let config = EmbeddingConfig {
        mode: EmbedMode::Dcae,
        train_samples: 128,
        batch_size: 128,
        ..EmbeddingConfig::default()
    };
    let mut embedder = Embedder::new(state_dim, config, &mut rng).unwrap();
    let initial = embedder.loss(&samples).unwrap();
    let mut taken = 0;
    while taken < steps {
        taken += train_embedder(&mut embedder, &buffer, &mut rng).unwrap().len();
    }
    (initial, embedder.loss(&samples).unwrap())
}

/// Worst relative error of analytic embedder gradients against central
/// differences. Points within 1e-3 of a ReLU kink are redrawn so the
/// differences see a smooth loss.
pub fn embedder_gradient_error(trials: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for mode in [EmbedMode::EmbNet, EmbedMode::Dcae] {
        let mut checked = 0;
        while checked < trials {
            let config = EmbeddingConfig {
                mode,
                ..EmbeddingConfig::default()
            };
            let e = Embedder::new(4, config, &mut rng).unwrap();
            let batch: Vec<EmbedSample> = (0..2)
                .map(|_| EmbedSample {
                    state: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    ret: rng.random_range(-1.0..1.0),
                    t: rng.random_range(0.0..1.0),
                })
                .collect();
            if e.relu_margin(&batch).unwrap() < 1e-3 {
                continue;
            }
            let (_, analytic) = e.loss_and_grad(&batch).unwrap();
            let mut probe = e.clone();
            let numeric = finite_difference(
                |p| {
                    probe.params.read_params(p);
                    probe.loss(&batch).unwrap()
                },
                &e.params.params_vec(),
                1e-4,
            );
            worst = worst.max(max_relative_error(&analytic, &numeric));
            checked += 1;
        }
    }
    worst
}
