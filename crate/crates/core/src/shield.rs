//! Runtime action filter.
//!
//! Far from every hazard (`ν > L_ν Δ`) the policy acts unmodified. Otherwise
//! the shield samples `N` candidate actions, predicts each one's next state,
//! scores it with the conformal margin `ν(ŝ') - 2 L_ν Γ`, and picks uniformly
//! among the best `top_k` positively-scored candidates; if none is positive it
//! falls back to the highest-scoring one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvConfig, EnvState, HiddenParams, Kinematics, Layout};
use crate::error::{Error, Result};
use crate::function_encoder::BasisSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShieldConfig {
    pub n_candidates: usize,
    pub top_k: usize,
    /// Lipschitz constant of ν in the agent position.
    pub l_nu: f64,
    /// Pre-safety distance Δ; must exceed the largest one-step displacement.
    pub pre_safety_margin: f64,
    /// Prediction horizon in steps.
    pub horizon: usize,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            n_candidates: 10,
            top_k: 5,
            l_nu: 1.0,
            pre_safety_margin: 0.275,
            horizon: 1,
        }
    }
}

impl ShieldConfig {
    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::Config("shield.n_candidates must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_candidates {
            return Err(Error::Config(format!(
                "shield.top_k must lie in [1, {}], got {}",
                self.n_candidates, self.top_k
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("shield.horizon must be at least 1".into()));
        }
        if !(self.l_nu > 0.0) {
            return Err(Error::Config("shield.l_nu must be positive".into()));
        }
        if !(self.pre_safety_margin > env.max_feature_step()) {
            return Err(Error::Config(format!(
                "shield.pre_safety_margin {} must exceed the one-step displacement bound {}",
                self.pre_safety_margin,
                env.max_feature_step()
            )));
        }
        Ok(())
    }
}

/// One-step kinematic predictor.
pub trait DynamicsModel {
    fn predict(&self, kin: &Kinematics, action: [f64; 2]) -> Result<Kinematics>;

    /// Predictions for several actions at one state; must agree exactly with
    /// calling [`predict`](Self::predict) on each.
    fn predict_many(&self, kin: &Kinematics, actions: &[[f64; 2]]) -> Result<Vec<Kinematics>> {
        actions.iter().map(|&a| self.predict(kin, a)).collect()
    }
}

/// Function-encoder prediction with fixed coefficients.
#[derive(Debug, Clone, Copy)]
pub struct FeModel<'a> {
    pub basis: &'a BasisSet,
    pub coefficients: &'a [f64],
}

impl DynamicsModel for FeModel<'_> {
    fn predict(&self, kin: &Kinematics, action: [f64; 2]) -> Result<Kinematics> {
        Ok(self.predict_many(kin, &[action])?.remove(0))
    }

    fn predict_many(&self, kin: &Kinematics, actions: &[[f64; 2]]) -> Result<Vec<Kinematics>> {
        let clipped: Vec<Vec<f64>> = actions
            .iter()
            .map(|a| vec![a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)])
            .collect();
        self.basis
            .predict_next_states(self.coefficients, &kin.to_vec(), &clipped)?
            .iter()
            .map(|next| {
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("function-encoder prediction"));
                }
                Kinematics::from_slice(next)
            })
            .collect()
    }
}

/// The true simulator step; an exact predictor.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub phi: HiddenParams,
    pub config: EnvConfig,
}

impl DynamicsModel for OracleModel {
    fn predict(&self, kin: &Kinematics, action: [f64; 2]) -> Result<Kinematics> {
        Ok(env::integrate(kin, action, &self.phi, &self.config))
    }
}

/// Source of policy actions at (possibly predicted) states.
pub trait ActionSampler {
    fn sample(&mut self, state: &EnvState) -> Result<[f64; 2]>;
    /// Deterministic action used for intermediate steps of multi-step rollouts.
    fn mean_action(&self, state: &EnvState) -> Result<[f64; 2]>;
}

/// Static scene the shield reasons about.
#[derive(Debug, Clone, Copy)]
pub struct Scene<'a> {
    pub config: &'a EnvConfig,
    pub layout: &'a Layout,
}

impl Scene<'_> {
    pub fn nu(&self, pos: [f64; 2]) -> f64 {
        env::nu(pos, &self.layout.obstacles, self.config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShieldDecision {
    pub action: [f64; 2],
    /// The full candidate verification ran.
    pub intervened: bool,
    pub safe_set_empty: bool,
    pub scores: Vec<f64>,
    pub candidates: Vec<[f64; 2]>,
    pub chosen: Option<usize>,
    pub gamma_used: f64,
}

impl ShieldDecision {
    /// Score of the executed action, if it was verified.
    pub fn chosen_score(&self) -> Option<f64> {
        self.chosen.map(|i| self.scores[i])
    }
}

/// `ν(s) > L_ν Δ`: every action is one-step safe, so verification is skipped.
pub fn pre_safety_check(state: &EnvState, scene: &Scene<'_>, cfg: &ShieldConfig) -> bool {
    scene.nu(state.pos()) > cfg.l_nu * cfg.pre_safety_margin
}

/// Conformal margin of a predicted position.
pub fn margin(nu_pred: f64, gamma: f64, l_nu: f64) -> f64 {
    nu_pred - 2.0 * l_nu * gamma
}

/// `ν(pos(ŝ')) - 2 L_ν Γ` for a single candidate.
pub fn safety_score<M: DynamicsModel + ?Sized>(
    action: [f64; 2],
    state: &EnvState,
    model: &M,
    scene: &Scene<'_>,
    gamma: f64,
    cfg: &ShieldConfig,
) -> Result<f64> {
    Ok(margin(predicted_nu(action, state, model, scene)?, gamma, cfg.l_nu))
}

fn predicted_nu<M: DynamicsModel + ?Sized>(
    action: [f64; 2],
    state: &EnvState,
    model: &M,
    scene: &Scene<'_>,
) -> Result<f64> {
    let next = model.predict(&state.kinematics(), action)?;
    Ok(scene.nu(next.position))
}

/// Minimum margin along an `h`-step predicted rollout that starts with
/// `action` and continues with the policy mean at predicted states. Returns
/// the minimum predicted ν (before the Γ penalty) alongside the score.
fn rollout_nu<M: DynamicsModel + ?Sized, S: ActionSampler + ?Sized>(
    action: [f64; 2],
    state: &EnvState,
    h: usize,
    model: &M,
    sampler: &S,
    scene: &Scene<'_>,
) -> Result<f64> {
    let kin = model.predict(&state.kinematics(), action)?;
    continue_rollout(kin, state, h, model, sampler, scene)
}

/// Minimum ν along a rollout whose first predicted state is `kin`.
fn continue_rollout<M: DynamicsModel + ?Sized, S: ActionSampler + ?Sized>(
    mut kin: Kinematics,
    state: &EnvState,
    h: usize,
    model: &M,
    sampler: &S,
    scene: &Scene<'_>,
) -> Result<f64> {
    let mut worst = scene.nu(kin.position);
    for j in 1..h {
        let predicted = env::observe(&kin, scene.layout, scene.config, state.step_index + j);
        let a = sampler.mean_action(&predicted)?;
        kin = model.predict(&kin, a)?;
        worst = worst.min(scene.nu(kin.position));
    }
    Ok(worst)
}

/// Multi-step score: the minimum per-step margin over an `h`-step rollout.
/// With `h = 1` this is exactly [`safety_score`].
pub fn multi_step_score<M: DynamicsModel + ?Sized, S: ActionSampler + ?Sized>(
    action: [f64; 2],
    state: &EnvState,
    h: usize,
    model: &M,
    sampler: &S,
    scene: &Scene<'_>,
    gamma: f64,
    cfg: &ShieldConfig,
) -> Result<f64> {
    if h == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    Ok(margin(
        rollout_nu(action, state, h, model, sampler, scene)?,
        gamma,
        cfg.l_nu,
    ))
}

/// The selection rule. `gamma` is the current conformal radius (possibly
/// `+∞` early in an episode, in which case nothing certifies and the
/// candidate with the largest predicted margin is used).
pub fn select_action<S, M, R>(
    sampler: &mut S,
    model: &M,
    state: &EnvState,
    scene: &Scene<'_>,
    gamma: f64,
    cfg: &ShieldConfig,
    rng: &mut R,
) -> Result<ShieldDecision>
where
    S: ActionSampler + ?Sized,
    M: DynamicsModel + ?Sized,
    R: Rng + ?Sized,
{
    if cfg.n_candidates == 0 {
        return Err(Error::InvalidArgument("shield needs at least one candidate".into()));
    }
    if pre_safety_check(state, scene, cfg) {
        return Ok(ShieldDecision {
            action: sampler.sample(state)?,
            intervened: false,
            safe_set_empty: false,
            scores: Vec::new(),
            candidates: Vec::new(),
            chosen: None,
            gamma_used: gamma,
        });
    }
    let candidates = (0..cfg.n_candidates)
        .map(|_| sampler.sample(state))
        .collect::<Result<Vec<_>>>()?;
    let nus = model
        .predict_many(&state.kinematics(), &candidates)?
        .into_iter()
        .map(|kin| continue_rollout(kin, state, cfg.horizon.max(1), model, sampler, scene))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = nus.iter().map(|&v| margin(v, gamma, cfg.l_nu)).collect();

    // Ranking by ν is the same as ranking by score for finite Γ, and stays
    // informative when Γ is infinite. Ties go to the lower index.
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| nus[j].total_cmp(&nus[i]).then(i.cmp(&j)));
    let positive: Vec<usize> = order.iter().copied().filter(|&i| scores[i] > 0.0).collect();

    let (chosen, empty) = if positive.is_empty() {
        (order[0], true)
    } else {
        let pool = &positive[..positive.len().min(cfg.top_k)];
        (pool[rng.random_range(0..pool.len())], false)
    };
    Ok(ShieldDecision {
        action: candidates[chosen],
        intervened: true,
        safe_set_empty: empty,
        scores,
        candidates,
        chosen: Some(chosen),
        gamma_used: gamma,
    })
}
