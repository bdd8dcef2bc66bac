//! Dec-POMDP environment interface and the two-agent coordination gridworld.
//!
//! Two agents move on a rectangular grid. The team is rewarded only when both
//! agents stand on their own goal cells at the same timestep; if exactly one
//! agent arrives, the episode ends with a penalty. Episodes also end,
//! unrewarded, at the step limit.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::Rng;

/// Per-agent primitive action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, 1),
            Action::Down => (0, -1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }
}

/// One action per agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointAction(pub Vec<Action>);

impl JointAction {
    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|a| a.index()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridworldConfig {
    pub width: usize,
    pub height: usize,
    pub starts: Vec<(usize, usize)>,
    pub goals: Vec<(usize, usize)>,
    pub penalty_p: f64,
    pub win_reward: f64,
    pub t_max: usize,
    /// Append the other agents' positions to each observation.
    #[serde(default)]
    pub observe_others: bool,
}

impl Default for GridworldConfig {
    fn default() -> Self {
        Self::corners(7, 7)
    }
}

impl GridworldConfig {
    /// The opposite-corner layout: agents start at `(0,0)` and
    /// `(w-1,h-1)` and must swap corners.
    pub fn corners(width: usize, height: usize) -> Self {
        let far = (width - 1, height - 1);
        Self {
            width,
            height,
            starts: vec![(0, 0), far],
            goals: vec![far, (0, 0)],
            penalty_p: 2.0,
            win_reward: 10.0,
            t_max: 50,
            observe_others: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be at least 1x1".into());
        }
        if self.starts.is_empty() || self.starts.len() != self.goals.len() {
            return bad(format!(
                "need one start and one goal per agent (got {} starts, {} goals)",
                self.starts.len(),
                self.goals.len()
            ));
        }
        let inside = |&(x, y): &(usize, usize)| x < self.width && y < self.height;
        for (i, (s, g)) in self.starts.iter().zip(&self.goals).enumerate() {
            if !inside(s) || !inside(g) {
                return bad(format!("agent {i} start or goal lies outside the grid"));
            }
            if s == g {
                return bad(format!("agent {i} starts on its goal"));
            }
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if !(self.penalty_p >= 0.0) || !self.win_reward.is_finite() {
            return bad("penalty must be non-negative and rewards finite".into());
        }
        Ok(())
    }
}

/// Positions of every agent plus the elapsed timestep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub positions: Vec<(usize, usize)>,
    pub t: usize,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: EnvState,
    pub action: JointAction,
    pub reward: f64,
    pub next_state: EnvState,
    pub terminal: bool,
    /// Observations at `state`.
    pub observations: Vec<Vec<f64>>,
    /// Observations at `next_state`.
    pub next_observations: Vec<Vec<f64>>,
}

/// Cooperative multi-agent environment with a global state available during
/// training and per-agent observations for execution.
pub trait Environment {
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn t_max(&self) -> usize;
    /// Upper bound on the undiscounted episode return.
    fn max_return(&self) -> f64;
    fn reset(&self, rng: &mut Rng) -> (EnvState, Vec<Vec<f64>>);
    fn step(&self, state: &EnvState, action: &JointAction) -> Result<Transition>;
    /// Global state features fed to embedders and mixers (excludes time).
    fn state_vector(&self, state: &EnvState) -> Vec<f64>;
    fn observations(&self, state: &EnvState) -> Vec<Vec<f64>>;
}

#[derive(Clone, Debug)]
pub struct Gridworld {
    config: GridworldConfig,
}

impl Gridworld {
    pub fn new(config: GridworldConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &GridworldConfig {
        &self.config
    }

    fn at_goal(&self, state: &EnvState) -> Vec<bool> {
        state.positions.iter().zip(&self.config.goals).map(|(p, g)| p == g).collect()
    }

    fn observe(&self, state: &EnvState, agent: usize) -> Vec<f64> {
        let c = &self.config;
        let (x, y) = state.positions[agent];
        let mut obs = vec![x as f64 / c.width as f64, y as f64 / c.height as f64];
        if c.observe_others {
            for (j, &(ox, oy)) in state.positions.iter().enumerate() {
                if j != agent {
                    obs.push(ox as f64 / c.width as f64);
                    obs.push(oy as f64 / c.height as f64);
                }
            }
        }
        obs.push(state.t as f64 / c.t_max as f64);
        obs
    }
}

impl Environment for Gridworld {
    fn n_agents(&self) -> usize {
        self.config.starts.len()
    }

    fn n_actions(&self) -> usize {
        Action::COUNT
    }

    fn obs_dim(&self) -> usize {
        if self.config.observe_others {
            2 * self.n_agents() + 1
        } else {
            3
        }
    }

    fn state_dim(&self) -> usize {
        2 * self.n_agents()
    }

    fn t_max(&self) -> usize {
        self.config.t_max
    }

    fn max_return(&self) -> f64 {
        self.config.win_reward
    }

    fn reset(&self, _rng: &mut Rng) -> (EnvState, Vec<Vec<f64>>) {
        let state = EnvState {
            positions: self.config.starts.clone(),
            t: 0,
            terminal: false,
        };
        let obs = self.observations(&state);
        (state, obs)
    }

    fn step(&self, state: &EnvState, action: &JointAction) -> Result<Transition> {
        if state.terminal {
            return Err(Error::TerminalStep);
        }
        check_len("joint action", self.n_agents(), action.0.len())?;
        let c = &self.config;
        let positions = state
            .positions
            .iter()
            .zip(&action.0)
            .map(|(&(x, y), a)| {
                let (dx, dy) = a.delta();
                let nx = (x as i64 + dx).clamp(0, c.width as i64 - 1) as usize;
                let ny = (y as i64 + dy).clamp(0, c.height as i64 - 1) as usize;
                (nx, ny)
            })
            .collect();
        let mut next = EnvState {
            positions,
            t: state.t + 1,
            terminal: false,
        };
        let arrived = self.at_goal(&next);
        let reward = if arrived.iter().all(|&a| a) {
            next.terminal = true;
            c.win_reward
        } else if arrived.iter().any(|&a| a) {
            next.terminal = true;
            -c.penalty_p
        } else {
            next.terminal = next.t >= c.t_max;
            0.0
        };
        Ok(Transition {
            observations: self.observations(state),
            next_observations: self.observations(&next),
            state: state.clone(),
            action: action.clone(),
            reward,
            terminal: next.terminal,
            next_state: next,
        })
    }

    fn state_vector(&self, state: &EnvState) -> Vec<f64> {
        let c = &self.config;
        state
            .positions
            .iter()
            .flat_map(|&(x, y)| [x as f64 / c.width as f64, y as f64 / c.height as f64])
            .collect()
    }

    fn observations(&self, state: &EnvState) -> Vec<Vec<f64>> {
        (0..self.n_agents()).map(|i| self.observe(state, i)).collect()
    }
}

/// A complete episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Global state vector for each visited state `s_0 ..= s_T`.
    pub states: Vec<Vec<f64>>,
    /// Intrinsic reward per transition (zero unless an exploration bonus is active).
    pub intrinsic: Vec<f64>,
    pub t_max: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Undiscounted episode return.
    pub fn episode_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// Normalized timestep of visited state `i`.
    pub fn time_feature(&self, i: usize) -> f64 {
        i as f64 / self.t_max as f64
    }
}

/// Desirability of an episode: its undiscounted return reaches `threshold`.
pub fn label_desirability(trajectory: &Trajectory, threshold: f64) -> bool {
    trajectory.episode_return() >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn corners() -> Gridworld {
        Gridworld::new(GridworldConfig::corners(7, 7)).unwrap()
    }

    fn traj_with_return(r: f64) -> Trajectory {
        let env = corners();
        let (s, _) = env.reset(&mut seeded_rng(0));
        let mut t = env.step(&s, &JointAction(vec![Action::Stay, Action::Stay])).unwrap();
        t.reward = r;
        Trajectory {
            states: vec![env.state_vector(&t.state), env.state_vector(&t.next_state)],
            transitions: vec![t],
            intrinsic: vec![0.0],
            t_max: 50,
        }
    }

    #[test]
    fn reset_places_agents_at_starts() {
        let env = corners();
        let (s, obs) = env.reset(&mut seeded_rng(1));
        assert_eq!(s.positions, vec![(0, 0), (6, 6)]);
        assert_eq!(s.t, 0);
        assert_eq!(obs[0], vec![0.0, 0.0, 0.0]);
        let (s2, _) = env.reset(&mut seeded_rng(1));
        assert_eq!(s, s2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = GridworldConfig::corners(7, 7);
        c.goals[0] = (7, 0);
        assert!(Gridworld::new(c).is_err());
        let mut c = GridworldConfig::corners(7, 7);
        c.goals[1] = c.starts[1];
        assert!(Gridworld::new(c).is_err());
        let mut c = GridworldConfig::default();
        c.t_max = 0;
        assert!(Gridworld::new(c).is_err());
    }

    #[test]
    fn simultaneous_arrival_wins() {
        let env = corners();
        let s = EnvState {
            positions: vec![(6, 5), (0, 1)],
            t: 11,
            terminal: false,
        };
        let tr = env.step(&s, &JointAction(vec![Action::Up, Action::Down])).unwrap();
        assert_eq!(tr.reward, 10.0);
        assert!(tr.terminal);
    }

    #[test]
    fn lone_arrival_is_penalized() {
        let env = corners();
        let s = EnvState {
            positions: vec![(6, 5), (3, 3)],
            t: 4,
            terminal: false,
        };
        let tr = env.step(&s, &JointAction(vec![Action::Up, Action::Stay])).unwrap();
        assert_eq!(tr.reward, -2.0);
        assert!(tr.terminal);
    }

    #[test]
    fn ordinary_step_and_clamping() {
        let env = corners();
        let (s, _) = env.reset(&mut seeded_rng(0));
        let tr = env.step(&s, &JointAction(vec![Action::Down, Action::Right])).unwrap();
        assert_eq!(tr.reward, 0.0);
        assert!(!tr.terminal);
        assert_eq!(tr.next_state.positions, vec![(0, 0), (6, 6)]);
        assert_eq!(tr.next_state.t, 1);
    }

    #[test]
    fn step_limit_terminates_without_reward() {
        let env = corners();
        let s = EnvState {
            positions: vec![(3, 3), (3, 3)],
            t: 49,
            terminal: false,
        };
        let tr = env.step(&s, &JointAction(vec![Action::Stay, Action::Stay])).unwrap();
        assert_eq!(tr.reward, 0.0);
        assert!(tr.terminal);
        assert!(matches!(
            env.step(&tr.next_state, &JointAction(vec![Action::Stay, Action::Stay])),
            Err(Error::TerminalStep)
        ));
    }

    #[test]
    fn desirability_threshold_is_inclusive() {
        assert!(label_desirability(&traj_with_return(10.0), 10.0));
        assert!(!label_desirability(&traj_with_return(-2.0), 10.0));
        assert!(!label_desirability(&traj_with_return(0.0), 10.0));
    }
}
