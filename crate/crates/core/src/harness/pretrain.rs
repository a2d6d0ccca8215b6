use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ExperimentConfig;
use crate::env::{sample_phi, EnvConfig, HiddenParams, PointEnv};
use crate::error::{Error, Result};
use crate::function_encoder::{train_basis, BasisSet, Provenance, TransitionDataset};
use crate::seeds::{derive_seed, rng_for, Stream};

/// Correlated random exploration `a ← clip(ρ a + σ ε − κ p / w)`: reaches
/// task-like speeds, and the weak pull toward the arena center keeps wall
/// contacts (velocity resets the model cannot predict) rare.
const EXPLORE_RHO: f64 = 0.8;
const EXPLORE_SIGMA: f64 = 0.6;
const EXPLORE_CENTERING: f64 = 0.15;

/// One random-policy episode per entry, with its hidden-parameter draw.
/// Episode `i` is fully determined by `(seed, i)`.
pub fn collect_random_dataset(
    env_cfg: &EnvConfig,
    intervals: &[[f64; 2]],
    seed: u64,
    first_episode: u64,
    episodes: usize,
    steps: usize,
) -> Result<(Vec<TransitionDataset>, Vec<HiddenParams>)> {
    let mut data = Vec::with_capacity(episodes);
    let mut phis = Vec::with_capacity(episodes);
    for i in 0..episodes as u64 {
        let ep = first_episode + i;
        let phi = sample_phi(&mut rng_for(seed, Stream::Phi, ep), intervals)?;
        let mut env = PointEnv::reset_seeded(env_cfg, phi, derive_seed(seed, Stream::EnvLayout, ep))?;
        let mut rng = rng_for(seed, Stream::Dataset, ep);
        let mut a = [0.0f64; 2];
        let mut d = TransitionDataset::new();
        for _ in 0..steps.min(env_cfg.horizon) {
            let s = env.kinematics().to_vec();
            for (i, v) in a.iter_mut().enumerate() {
                let pull = EXPLORE_CENTERING * s[i] / env_cfg.arena_half_width;
                *v = (EXPLORE_RHO * *v + EXPLORE_SIGMA * rng.sample::<f64, _>(StandardNormal) - pull).clamp(-1.0, 1.0);
            }
            env.step(a)?;
            d.push(&s, &a, &env.kinematics().to_vec());
        }
        data.push(d);
        phis.push(phi);
    }
    Ok((data, phis))
}

/// Held-out error of an episode: coefficients from the first half, mean
/// squared next-state error on the second.
pub fn heldout_split_mse(basis: &BasisSet, episode: &TransitionDataset, ridge: f64) -> Result<(f64, f64)> {
    let (fit, test) = episode.split_at(episode.len() / 2);
    let b = basis.compute_coefficients(&fit, ridge)?;
    Ok((
        basis.prediction_mse(&b.b, &test)?,
        basis.prediction_mse(&basis.mean_coefficients, &test)?,
    ))
}

/// Mean squared error of predicting the constant mean delta of `train`.
pub fn mean_predictor_mse(train: &[TransitionDataset], test: &[TransitionDataset]) -> Result<f64> {
    let dim = train
        .iter()
        .find_map(|d| d.targets.first().map(Vec::len))
        .ok_or_else(|| Error::InvalidArgument("no training transitions".into()))?;
    let mut mean = vec![0.0; dim];
    let mut n = 0.0;
    for d in train {
        for y in &d.targets {
            mean.iter_mut().zip(y).for_each(|(m, v)| *m += v);
            n += 1.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut total = 0.0;
    let mut count = 0.0;
    for d in test {
        let (_, second) = d.split_at(d.len() / 2);
        for y in &second.targets {
            total += y.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += 1.0;
        }
    }
    Ok(if count > 0.0 { total / count } else { 0.0 })
}

/// Collects the offline dataset, trains the basis and evaluates it on the
/// held-out episodes.
pub fn pretrain_fe(cfg: &ExperimentConfig) -> Result<(BasisSet, Provenance)> {
    let fe = &cfg.fe;
    let seed = cfg.experiment.seed;
    let (mut data, phis) = collect_random_dataset(
        &cfg.env,
        &cfg.experiment.train_intervals,
        seed,
        0,
        fe.episodes,
        fe.steps_per_episode,
    )?;
    let heldout = data.split_off(fe.episodes - fe.heldout_episodes);
    let mut rng = rng_for(seed, Stream::Basis, 0);
    let basis = train_basis(&data, &fe.basis_config(), crate::env::Kinematics::DIM, &mut rng)?;

    let mut fe_mse = 0.0;
    let mut cf_mse = 0.0;
    for ep in &heldout {
        let (a, b) = heldout_split_mse(&basis, ep, fe.ridge)?;
        fe_mse += a / heldout.len().max(1) as f64;
        cf_mse += b / heldout.len().max(1) as f64;
    }
    let provenance = Provenance {
        seed,
        episodes: fe.episodes,
        steps_per_episode: fe.steps_per_episode.min(cfg.env.horizon),
        phi_draws: phis,
        heldout_mse: fe_mse,
        mean_predictor_mse: mean_predictor_mse(&data, &heldout)?,
        context_free_mse: cf_mse,
    };
    Ok((basis, provenance))
}
