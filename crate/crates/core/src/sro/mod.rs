//! Safety-regularized actor-critic on a Lagrangian clipped-surrogate base.
//!
//! The policy ascends `A_aug - λ A_C` where `A_aug = norm(A_R) + α Q_safe` and
//! `Q_safe ∈ (-1, 0]` is a Monte-Carlo estimate of the policy-weighted cost
//! sensitivity around the taken action. With `α = 0` the regularizer vanishes
//! and the update is the plain Lagrangian one.

mod buffer;
mod critics;
mod policy;
mod q_safe;
pub mod tabular;
mod update;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use buffer::{gae, RolloutBuffer, Step};
pub use critics::CriticSet;
pub use policy::{GaussianPolicy, LOG_STD_MAX, LOG_STD_MIN};
pub use q_safe::{q_safe_batch, q_safe_estimate, Q_SAFE_FLOOR};
pub use update::{
    critic_loss_grads, critic_losses, critic_step, critic_update, policy_advantages, policy_update, q_c_step,
    surrogate_loss_and_grad, CriticLosses, CriticOptimizers, PolicyDiagnostics,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the safety regularizer.
    pub alpha: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub kl_max: f64,
    pub lagrangian_lr: f64,
    pub lagrangian_init: f64,
    pub cost_limit: f64,
    /// Passes over the rollout per update.
    pub update_epochs: usize,
    pub steps_per_epoch: usize,
    pub minibatch: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub max_grad_norm: f64,
    /// Perturbed actions per Q_safe estimate.
    pub n_safe_samples: usize,
    /// Std of the action perturbation in Q_safe.
    pub sigma: f64,
    /// Stabilizer in the Q_safe denominator.
    pub eps_num: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            kl_max: 0.02,
            lagrangian_lr: 0.035,
            lagrangian_init: 0.0,
            cost_limit: 0.0,
            update_epochs: 5,
            steps_per_epoch: 4000,
            minibatch: 256,
            policy_lr: 3e-4,
            critic_lr: 1e-3,
            hidden: vec![32, 32],
            init_log_std: -0.5,
            max_grad_norm: 0.5,
            n_safe_samples: 10,
            sigma: 0.1,
            eps_num: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "train.alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "train.gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("train.gae_lambda must lie in [0, 1]".into()));
        }
        if self.n_safe_samples == 0 || self.minibatch == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "train.n_safe_samples, train.minibatch and train.steps_per_epoch must be positive".into(),
            ));
        }
        if !(self.sigma > 0.0 && self.eps_num > 0.0 && self.clip_ratio > 0.0) {
            return Err(Error::Config(
                "train.sigma, train.eps_num and train.clip_ratio must be positive".into(),
            ));
        }
        if self.lagrangian_init < 0.0 || self.lagrangian_lr < 0.0 {
            return Err(Error::Config(
                "Lagrange multiplier settings must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Projected dual ascent: `max(0, λ + lr (cost - limit))`.
pub fn lagrangian_update(lambda: f64, episode_cost_mean: f64, cost_limit: f64, lr: f64) -> f64 {
    (lambda + lr * (episode_cost_mean - cost_limit)).max(0.0)
}

/// `A_R + α Q_safe`; exactly `A_R` when `α = 0`.
pub fn augmented_advantage(a_r: f64, q_safe: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        a_r
    } else {
        a_r + alpha * q_safe
    }
}
