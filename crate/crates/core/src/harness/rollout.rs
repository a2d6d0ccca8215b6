use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::EpisodeMetrics;
use crate::conformal::{self, AcpState};
use crate::env::{observation_vector, EnvConfig, EnvState, PointEnv};
use crate::error::Result;
use crate::function_encoder::{BasisSet, OnlineCoefficients};
use crate::shield::{self, ActionSampler, DynamicsModel, FeModel, OracleModel, Scene};
use crate::sro::{CriticSet, GaussianPolicy, RolloutBuffer, Step};

/// Predictor used by the shield.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShieldModelKind {
    FunctionEncoder,
    /// The simulator itself, with the episode's true hidden parameters.
    GroundTruth,
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeSettings<'a> {
    pub cfg: &'a ExperimentConfig,
    pub basis: Option<&'a BasisSet>,
    pub shield: bool,
    pub shield_model: ShieldModelKind,
    /// Replaces the adaptive conformal radius.
    pub fixed_gamma: Option<f64>,
}

impl<'a> EpisodeSettings<'a> {
    pub fn new(cfg: &'a ExperimentConfig, basis: Option<&'a BasisSet>, shield: bool) -> Self {
        Self {
            cfg,
            basis,
            shield,
            shield_model: ShieldModelKind::FunctionEncoder,
            fixed_gamma: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub steps: usize,
    pub return_: f64,
    pub costs: usize,
    pub interventions: usize,
    pub empty_safe_sets: usize,
    pub acp_misses: usize,
    pub acp_scores: usize,
    pub gamma_sum: f64,
    pub gamma_count: usize,
    pub seconds: f64,
}

impl EpisodeResult {
    pub fn cost_rate(&self) -> f64 {
        ratio(self.costs, self.steps)
    }

    pub fn metrics(&self, phase: &str, epoch: usize, episode: usize) -> EpisodeMetrics {
        EpisodeMetrics {
            phase: phase.into(),
            epoch,
            episode,
            steps: self.steps,
            return_: self.return_,
            cost_rate: self.cost_rate(),
            shield_trigger_rate: ratio(self.interventions, self.steps),
            safe_set_empty_rate: ratio(self.empty_safe_sets, self.steps),
            acp_miss_rate: ratio(self.acp_misses, self.acp_scores),
            mean_gamma: (self.gamma_count > 0).then(|| self.gamma_sum / self.gamma_count as f64),
            wall_clock_seconds: self.seconds,
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Draws policy actions for the shield and remembers their log-densities.
/// The mean for the current input is cached, since all candidates of a step
/// share it.
struct PolicySampler<'a, R: Rng + ?Sized> {
    policy: &'a GaussianPolicy,
    context: &'a [f64],
    config: &'a EnvConfig,
    rng: &'a mut R,
    log_probs: Vec<f64>,
    cached: Option<(Vec<f64>, Vec<f64>)>,
}

impl<R: Rng + ?Sized> PolicySampler<'_, R> {
    fn input(&self, state: &EnvState) -> Vec<f64> {
        let mut x = observation_vector(state, self.config);
        x.extend_from_slice(self.context);
        x
    }
}

impl<R: Rng + ?Sized> ActionSampler for PolicySampler<'_, R> {
    fn sample(&mut self, state: &EnvState) -> Result<[f64; 2]> {
        let x = self.input(state);
        let mu = match &self.cached {
            Some((input, mu)) if *input == x => mu.clone(),
            _ => {
                let mu = self.policy.mean_action(&x)?;
                self.cached = Some((x, mu.clone()));
                mu
            }
        };
        let (a, lp) = self.policy.sample_around(&mu, self.rng);
        self.log_probs.push(lp);
        Ok([a[0], a[1]])
    }

    fn mean_action(&self, state: &EnvState) -> Result<[f64; 2]> {
        let m = self.policy.mean_action(&self.input(state))?;
        Ok([m[0], m[1]])
    }
}

fn clip_action(a: [f64; 2]) -> [f64; 2] {
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

/// Runs `env` to its horizon. With a buffer, every step is recorded and the
/// segment is closed with bootstrapped values (episodes end by time limit).
pub fn run_episode<R1, R2>(
    env: &mut PointEnv,
    policy: &GaussianPolicy,
    critics: Option<&CriticSet>,
    settings: &EpisodeSettings<'_>,
    policy_rng: &mut R1,
    shield_rng: &mut R2,
    mut buffer: Option<&mut RolloutBuffer>,
) -> Result<EpisodeResult>
where
    R1: Rng + ?Sized,
    R2: Rng + ?Sized,
{
    let cfg = settings.cfg;
    let started = Instant::now();
    let env_cfg = env.config().clone();
    let phi = *env.phi();
    let mut online = settings
        .basis
        .map(|b| OnlineCoefficients::new(b.k(), cfg.fe.refresh_period, cfg.fe.ridge, cfg.fe.window_cap()));
    let mut acp = AcpState::new(&cfg.acp);
    let oracle = OracleModel {
        phi,
        config: env_cfg.clone(),
    };
    let mut out = EpisodeResult::default();

    let context_of = |online: &Option<OnlineCoefficients>| -> Vec<f64> {
        if cfg.experiment.oracle_phi {
            phi.to_vec()
        } else if cfg.experiment.fe_context {
            online
                .as_ref()
                .map_or_else(|| vec![0.0; cfg.fe.k], |o| o.coefficients().b.clone())
        } else {
            Vec::new()
        }
    };

    while !env.done() {
        let state = env.state();
        let context = context_of(&online);
        let mut input = observation_vector(&state, &env_cfg);
        input.extend_from_slice(&context);
        let gamma = settings.fixed_gamma.unwrap_or_else(|| acp.radius());
        let b_now: Vec<f64> = online.as_ref().map(|o| o.coefficients().b.clone()).unwrap_or_default();

        let (action, log_prob) = if settings.shield {
            let layout = env.layout().clone();
            let scene = Scene {
                config: &env_cfg,
                layout: &layout,
            };
            let mut sampler = PolicySampler {
                policy,
                context: &context,
                config: &env_cfg,
                rng: &mut *policy_rng,
                log_probs: Vec::new(),
                cached: None,
            };
            let fe_model;
            let model: &dyn DynamicsModel = match (settings.shield_model, settings.basis) {
                (ShieldModelKind::FunctionEncoder, Some(basis)) => {
                    fe_model = FeModel {
                        basis,
                        coefficients: &b_now,
                    };
                    &fe_model
                }
                (ShieldModelKind::FunctionEncoder, None) => {
                    return Err(crate::Error::InvalidArgument("the shield needs a trained basis".into()));
                }
                (ShieldModelKind::GroundTruth, _) => &oracle,
            };
            let d = shield::select_action(
                &mut sampler,
                model,
                &state,
                &scene,
                gamma,
                &cfg.shield,
                &mut *shield_rng,
            )?;
            let lp = sampler.log_probs[d.chosen.unwrap_or(0)];
            if d.intervened {
                out.interventions += 1;
                out.empty_safe_sets += usize::from(d.safe_set_empty);
                if gamma.is_finite() {
                    out.gamma_sum += gamma;
                    out.gamma_count += 1;
                }
            }
            (d.action, lp)
        } else {
            let (a, lp) = policy.act(&input, policy_rng)?;
            ([a[0], a[1]], lp)
        };

        let values = match (&buffer, critics) {
            (Some(_), Some(c)) => Some((c.value_r(&input)?, c.value_c(&input)?)),
            _ => None,
        };
        let t = env.step(action)?;
        out.steps += 1;
        out.return_ += t.reward;
        out.costs += usize::from(t.cost);

        if let (Some(basis), Some(online)) = (settings.basis, online.as_mut()) {
            let s = state.kinematics().to_vec();
            let s_next = t.next_state.kinematics().to_vec();
            let g = basis.evaluate(&s, &clip_action(action))?;
            if online.is_fitted() {
                let delta = basis.delta_from_values(&g, &b_now)?;
                let predicted: Vec<f64> = s.iter().zip(&delta).map(|(x, d)| x + d).collect();
                let score = conformal::score(&s_next, &predicted)?;
                let was_warm = acp.warmed_up();
                let radius = acp.gamma;
                acp.observe(score)?;
                if was_warm {
                    out.acp_scores += 1;
                    out.acp_misses += usize::from(score > radius);
                }
            }
            let delta: Vec<f64> = s_next.iter().zip(&s).map(|(n, c)| n - c).collect();
            online.update_with_values(basis, g, &delta)?;
        }

        if let (Some(buf), Some((v_r, v_c))) = (buffer.as_deref_mut(), values) {
            buf.push(Step {
                input,
                action: action.to_vec(),
                log_prob,
                reward: t.reward,
                cost: f64::from(t.cost),
                v_r,
                v_c,
            });
        }
    }

    if let (Some(buf), Some(c)) = (buffer, critics) {
        let mut last = observation_vector(&env.state(), &env_cfg);
        last.extend(context_of(&online));
        buf.finish_segment(c.value_r(&last)?, c.value_c(&last)?);
    }
    out.seconds = started.elapsed().as_secs_f64();
    Ok(out)
}
