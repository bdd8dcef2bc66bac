//! Reward augmentation built on episodic memory.
//!
//! - Episodic incentive: a count-weighted bonus toward the remembered best
//!   return, paid only for transitions into states that lie on desirable
//!   trajectories.
//! - Conventional episodic control: an extra squared error pulling `Q_tot`
//!   toward the one-step memory target.
//! - Reward-form episodic control: the same pull expressed as a transition
//!   reward, which yields an identical gradient.
//! - E3B: an elliptical novelty bonus over state embeddings.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::Recall;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IncentiveMode {
    EpisodicIncentive,
    ConventionalEc { lambda: f64 },
    RewardEc { lambda: f64 },
    E3b { lambda_e3b: f64, beta_e3b: f64 },
    None,
}

impl IncentiveMode {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            IncentiveMode::ConventionalEc { lambda } | IncentiveMode::RewardEc { lambda } => lambda >= 0.0,
            IncentiveMode::E3b { lambda_e3b, beta_e3b } => lambda_e3b > 0.0 && beta_e3b >= 0.0,
            IncentiveMode::EpisodicIncentive | IncentiveMode::None => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid incentive parameters: {self:?}")))
        }
    }

    /// Whether the mode reads the episodic buffer during training.
    pub fn uses_memory(&self) -> bool {
        matches!(
            self,
            IncentiveMode::EpisodicIncentive | IncentiveMode::ConventionalEc { .. } | IncentiveMode::RewardEc { .. }
        )
    }
}

/// Episodic incentive for a transition into `s'`.
///
/// `target_max` is the target network's bootstrap value at `s'`. Returns 0
/// when recall missed or the memory was never reached by a desirable episode.
/// With `clamp`, a target that already exceeds the remembered return yields 0
/// rather than a negative reward.
pub fn episodic_incentive(recall: Option<&Recall>, target_max: f64, gamma: f64, clamp: bool) -> Result<f64> {
    let Some(r) = recall else { return Ok(0.0) };
    if r.n_xi == 0 {
        return Ok(0.0);
    }
    if r.n_call == 0 || r.n_xi > r.n_call {
        return Err(Error::Invariant(format!(
            "desirable visits {} exceed calls {}",
            r.n_xi, r.n_call
        )));
    }
    let gap = r.h - target_max;
    let gap = if clamp { gap.max(0.0) } else { gap };
    Ok(gamma * (r.n_xi as f64 / r.n_call as f64) * gap)
}

/// One-step memory target `r + gamma * H(s')`.
pub fn ec_target(reward: f64, gamma: f64, h_next: f64) -> f64 {
    reward + gamma * h_next
}

/// `lambda * (Q_EC - Q_tot)^2`, or 0 when no memory target exists.
pub fn ec_loss_term(q_ec: Option<f64>, q_tot: f64, lambda: f64) -> f64 {
    q_ec.map_or(0.0, |q| lambda * (q - q_tot).powi(2))
}

/// Transition reward `lambda * (r + gamma * H(s') - Q(s,a))`, or 0 when no
/// memory target exists.
pub fn reward_ec(reward: f64, gamma: f64, h_next: Option<f64>, q_sa: f64, lambda: f64) -> f64 {
    h_next.map_or(0.0, |h| lambda * (ec_target(reward, gamma, h) - q_sa))
}

/// Per-episode inverse covariance of state features.
#[derive(Clone, Debug)]
pub struct E3bState {
    pub inv_cov: Array2<f64>,
}

impl E3bState {
    pub fn new(dim: usize, lambda_e3b: f64) -> Self {
        Self {
            inv_cov: Array2::eye(dim) / lambda_e3b,
        }
    }

    pub fn reset(&mut self, lambda_e3b: f64) {
        let dim = self.inv_cov.nrows();
        self.inv_cov = Array2::eye(dim) / lambda_e3b;
    }
}

/// Elliptical bonus `phi^T C^-1 phi`, followed by the Sherman-Morrison
/// update of `C^-1` with `phi phi^T`.
pub fn e3b_bonus(phi: &[f64], state: &mut E3bState) -> f64 {
    let phi = Array1::from(phi.to_vec());
    let u = state.inv_cov.dot(&phi);
    let b = phi.dot(&u);
    let scale = 1.0 / (1.0 + b);
    let dim = u.len();
    for i in 0..dim {
        for j in 0..dim {
            state.inv_cov[[i, j]] -= scale * u[i] * u[j];
        }
    }
    b
}

/// Pieces contributed by an incentive to a single transition.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Augmentation {
    /// Added to the TD target.
    pub target_bonus: f64,
    /// Memory target for the conventional regularizer, if any.
    pub ec_target: Option<f64>,
}

/// Everything a mode may need to price one transition.
#[derive(Clone, Copy, Debug, Default)]
pub struct TransitionContext<'a> {
    pub gamma: f64,
    pub recall: Option<&'a Recall>,
    /// Bootstrap value at `s'` from the target network.
    pub target_max: f64,
    /// Online `Q_tot(s, a)`, treated as a constant.
    pub q_sa: f64,
    /// Exploration bonus recorded at collection time.
    pub intrinsic: f64,
    /// Scale on the intrinsic bonus.
    pub beta_c: f64,
    pub terminal: bool,
    pub clamp: bool,
}

/// Combines the environment reward with the mode's augmentation.
///
/// Returns the augmentation; the effective reward in the TD target is
/// `r + target_bonus`.
pub fn combined_reward(reward: f64, mode: &IncentiveMode, ctx: &TransitionContext) -> Result<Augmentation> {
    // memory terms: a terminal next state has zero future return
    let h_next = if ctx.terminal { Some(0.0) } else { ctx.recall.map(|r| r.h) };
    let intrinsic = ctx.beta_c * ctx.intrinsic;
    Ok(match *mode {
        IncentiveMode::None => Augmentation {
            target_bonus: intrinsic,
            ec_target: None,
        },
        IncentiveMode::E3b { .. } => Augmentation {
            target_bonus: intrinsic,
            ec_target: None,
        },
        IncentiveMode::EpisodicIncentive => {
            let rp = if ctx.terminal {
                0.0
            } else {
                episodic_incentive(ctx.recall, ctx.target_max, ctx.gamma, ctx.clamp)?
            };
            Augmentation {
                target_bonus: rp + intrinsic,
                ec_target: None,
            }
        }
        IncentiveMode::RewardEc { lambda } => Augmentation {
            target_bonus: reward_ec(reward, ctx.gamma, h_next, ctx.q_sa, lambda) + intrinsic,
            ec_target: None,
        },
        IncentiveMode::ConventionalEc { .. } => Augmentation {
            target_bonus: intrinsic,
            ec_target: h_next.map(|h| ec_target(reward, ctx.gamma, h)),
        },
    })
}
