use serde::{Deserialize, Serialize};

use super::metrics::{MetricsRecord, MetricsWriter};
use super::rollout::{run_episode, EpisodeResult, EpisodeSettings, ShieldModelKind};
use super::trainer::Checkpoint;
use crate::env::{sample_phi, PointEnv};
use crate::error::Result;
use crate::seeds::{derive_seed, rng_for, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub episodes: usize,
    pub ood: bool,
    /// `None` keeps the checkpoint's own setting.
    pub shield: Option<bool>,
    pub shield_model: ShieldModelKind,
    pub fixed_gamma: Option<f64>,
    /// Offsets the episode seeds so independent evaluations do not overlap.
    pub first_episode: u64,
}

impl EvalOptions {
    pub fn new(episodes: usize, ood: bool) -> Self {
        Self {
            episodes,
            ood,
            shield: None,
            shield_model: ShieldModelKind::FunctionEncoder,
            fixed_gamma: None,
            first_episode: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub ood: bool,
    pub shield: bool,
    pub mean_return: f64,
    pub std_return: f64,
    /// Σ costs / Σ steps over all episodes.
    pub cost_rate: f64,
    pub std_episode_cost_rate: f64,
    pub shield_trigger_rate: f64,
    pub safe_set_empty_rate: f64,
    pub acp_miss_rate: f64,
    pub mean_seconds_per_episode: f64,
    pub total_steps: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

impl EvalSummary {
    pub fn from_results(results: &[EpisodeResult], ood: bool, shield: bool) -> Self {
        let steps: usize = results.iter().map(|r| r.steps).sum();
        let sum = |f: fn(&EpisodeResult) -> usize| results.iter().map(f).sum::<usize>() as f64;
        let per = |x: f64, d: usize| if d == 0 { 0.0 } else { x / d as f64 };
        let returns: Vec<f64> = results.iter().map(|r| r.return_).collect();
        let rates: Vec<f64> = results.iter().map(EpisodeResult::cost_rate).collect();
        let (mean_return, std_return) = mean_std(&returns);
        let (_, std_rate) = mean_std(&rates);
        let acp_scores = sum(|r| r.acp_scores) as usize;
        Self {
            episodes: results.len(),
            ood,
            shield,
            mean_return,
            std_return,
            cost_rate: per(sum(|r| r.costs), steps),
            std_episode_cost_rate: std_rate,
            shield_trigger_rate: per(sum(|r| r.interventions), steps),
            safe_set_empty_rate: per(sum(|r| r.empty_safe_sets), steps),
            acp_miss_rate: per(sum(|r| r.acp_misses), acp_scores),
            mean_seconds_per_episode: per(results.iter().map(|r| r.seconds).sum(), results.len()),
            total_steps: steps,
        }
    }
}

/// Runs `opts.episodes` evaluation episodes with the stochastic policy.
/// Episode `i` draws φ, layout, policy and shield noise from its own
/// evaluation-stream seeds, so results do not depend on episode order.
pub fn evaluate(
    ckpt: &Checkpoint,
    opts: &EvalOptions,
    mut writer: Option<&mut MetricsWriter>,
) -> Result<(EvalSummary, Vec<EpisodeResult>)> {
    let cfg = &ckpt.config;
    let seed = cfg.experiment.seed;
    let shield = opts.shield.unwrap_or(cfg.experiment.shield_enabled);
    let mut env_cfg = cfg.env.clone();
    let intervals = if opts.ood {
        env_cfg.obstacle_count += cfg.experiment.ood_extra_obstacles;
        &cfg.experiment.ood_intervals
    } else {
        &cfg.experiment.train_intervals
    };
    let settings = EpisodeSettings {
        cfg,
        basis: ckpt.basis.as_ref(),
        shield,
        shield_model: opts.shield_model,
        fixed_gamma: opts.fixed_gamma,
    };
    let phase = if opts.ood { "eval_ood" } else { "eval" };
    let mut results = Vec::with_capacity(opts.episodes);
    for i in 0..opts.episodes as u64 {
        let ep = opts.first_episode + i;
        let phi = sample_phi(&mut rng_for(seed, Stream::Eval, ep * 4), intervals)?;
        let mut env = PointEnv::reset_seeded(&env_cfg, phi, derive_seed(seed, Stream::Eval, ep * 4 + 1))?;
        let r = run_episode(
            &mut env,
            &ckpt.policy,
            None,
            &settings,
            &mut rng_for(seed, Stream::Eval, ep * 4 + 2),
            &mut rng_for(seed, Stream::Eval, ep * 4 + 3),
            None,
        )?;
        if let Some(w) = writer.as_deref_mut() {
            w.emit(MetricsRecord::Episode(r.metrics(phase, ckpt.epochs_done, ep as usize)))?;
        }
        results.push(r);
    }
    Ok((EvalSummary::from_results(&results, opts.ood, shield), results))
}
