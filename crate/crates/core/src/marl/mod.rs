//! Value-factorized multi-agent Q-learning.
//!
//! Agents share one utility network; a mixer (VDN or a monotonic
//! hypernetwork mixer) combines their chosen values into `Q_tot`, trained
//! end-to-end on whole-episode replay with double Q-learning targets.

pub mod agent;
pub mod learner;
pub mod mixer;
pub mod replay;
pub mod run;

pub use agent::{argmax, select_actions, AgentNet};
pub use learner::{BatchStats, MemoryAccess, QLearner, TrainConfig};
pub use mixer::{Mixer, MixerKind};
pub use replay::{ReplayBuffer, StoredEpisode};
pub use run::{evaluate, rollout, train_run, EvalPoint, PolicySnapshot, RunConfig, RunOutcome};
