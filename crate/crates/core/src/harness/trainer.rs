use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{EpochMetrics, MetricsRecord, MetricsWriter};
use super::rollout::{run_episode, EpisodeSettings};
use crate::env::{sample_phi, PointEnv};
use crate::error::{Error, Result};
use crate::function_encoder::BasisSet;
use crate::numerics::Adam;
use crate::seeds::{derive_seed, rng_for, Stream};
use crate::sro::{
    critic_update, lagrangian_update, policy_update, q_safe_batch, CriticOptimizers, CriticSet, GaussianPolicy,
    RolloutBuffer,
};

pub const CHECKPOINT_FORMAT: &str = "shieldrl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_FORMAT: &str = "shieldrl-metrics";

/// Everything needed to evaluate a policy or continue training it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub policy: GaussianPolicy,
    pub critics: CriticSet,
    pub policy_adam: Adam,
    pub critic_adam: CriticOptimizers,
    pub lambda: f64,
    pub epochs_done: usize,
    pub episodes_done: u64,
    pub steps_done: usize,
    pub basis: Option<BasisSet>,
}

impl Checkpoint {
    /// Freshly initialized networks for `cfg`.
    pub fn initial(cfg: &ExperimentConfig, basis: Option<BasisSet>) -> Result<Self> {
        cfg.validate()?;
        if cfg.needs_basis() && basis.is_none() {
            return Err(Error::InvalidArgument(
                "this configuration needs a basis (shield or FE context enabled)".into(),
            ));
        }
        if let Some(b) = &basis {
            if b.k() != cfg.fe.k && cfg.experiment.fe_context {
                return Err(Error::Config(format!(
                    "basis has k = {}, config says fe.k = {}",
                    b.k(),
                    cfg.fe.k
                )));
            }
        }
        let seed = cfg.experiment.seed;
        let input = cfg.policy_input_dim();
        let t = &cfg.train;
        let policy = GaussianPolicy::new(input, 2, &t.hidden, t.init_log_std, &mut rng_for(seed, Stream::Init, 0))?;
        let critics = CriticSet::new(
            input,
            2,
            &t.hidden,
            [
                &mut rng_for(seed, Stream::Init, 1),
                &mut rng_for(seed, Stream::Init, 2),
                &mut rng_for(seed, Stream::Init, 3),
            ],
        )?;
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            policy_adam: Adam::new(policy.num_params(), t.policy_lr),
            critic_adam: CriticOptimizers::new(&critics, t.critic_lr),
            policy,
            critics,
            lambda: t.lagrangian_init,
            epochs_done: 0,
            episodes_done: 0,
            steps_done: 0,
            basis,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        let format = probe.get("format").and_then(|v| v.as_str()).unwrap_or("");
        let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if format != CHECKPOINT_FORMAT || version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Version(format!("{format} v{version}")));
        }
        Ok(serde_json::from_value(probe)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Number of epochs a configuration runs.
pub fn epoch_count(cfg: &ExperimentConfig) -> usize {
    cfg.experiment.total_steps.div_ceil(cfg.train.steps_per_epoch)
}

/// Trains from scratch; see [`train_from`].
pub fn train(cfg: &ExperimentConfig, basis: Option<BasisSet>, writer: &mut MetricsWriter) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::initial(cfg, basis)?;
    writer.emit(MetricsRecord::Header {
        format: METRICS_FORMAT.into(),
        version: 1,
        seed: cfg.experiment.seed,
        config: cfg.to_toml()?,
    })?;
    train_from(&mut ckpt, epoch_count(cfg), writer)?;
    Ok(ckpt)
}

/// Runs epochs `ckpt.epochs_done .. until` in place. Every random stream is
/// keyed by epoch or episode index, so stopping and resuming from a saved
/// checkpoint reproduces an uninterrupted run.
pub fn train_from(ckpt: &mut Checkpoint, until: usize, writer: &mut MetricsWriter) -> Result<()> {
    let cfg = ckpt.config.clone();
    let seed = cfg.experiment.seed;
    let t = &cfg.train;
    let sro = cfg.experiment.sro_enabled;
    while ckpt.epochs_done < until {
        let epoch = ckpt.epochs_done;
        let started = Instant::now();
        let mut policy_rng = rng_for(seed, Stream::Policy, epoch as u64);
        let mut shield_rng = rng_for(seed, Stream::Shield, epoch as u64);
        let mut buffer = RolloutBuffer::new();
        let mut results = Vec::new();
        let settings = EpisodeSettings::new(&cfg, ckpt.basis.as_ref(), cfg.experiment.shield_enabled);
        while buffer.len() < t.steps_per_epoch {
            let ep = ckpt.episodes_done;
            let phi = sample_phi(&mut rng_for(seed, Stream::Phi, ep), &cfg.experiment.train_intervals)?;
            let mut env = PointEnv::reset_seeded(&cfg.env, phi, derive_seed(seed, Stream::EnvLayout, ep))?;
            let r = run_episode(
                &mut env,
                &ckpt.policy,
                Some(&ckpt.critics),
                &settings,
                &mut policy_rng,
                &mut shield_rng,
                Some(&mut buffer),
            )?;
            writer.emit(MetricsRecord::Episode(r.metrics("train", epoch, ep as usize)))?;
            results.push(r);
            ckpt.episodes_done += 1;
        }
        buffer.compute(t.gamma, t.gae_lambda)?;

        let mut minibatch_rng = rng_for(seed, Stream::Minibatch, epoch as u64);
        let losses = critic_update(
            &mut ckpt.critics,
            &mut ckpt.critic_adam,
            &buffer,
            sro,
            t,
            &mut minibatch_rng,
        )?;
        let q_safe = if sro {
            let mut q_rng = rng_for(seed, Stream::QSafe, epoch as u64);
            Some(q_safe_batch(&buffer, &ckpt.policy, &ckpt.critics, t, &mut q_rng)?)
        } else {
            None
        };
        let diag = policy_update(
            &buffer,
            &mut ckpt.policy,
            &mut ckpt.policy_adam,
            q_safe.as_deref(),
            ckpt.lambda,
            t,
            &mut minibatch_rng,
        )?;

        let n = results.len() as f64;
        let steps: usize = results.iter().map(|r| r.steps).sum();
        let mean_cost = results.iter().map(|r| r.costs as f64).sum::<f64>() / n;
        ckpt.lambda = lagrangian_update(ckpt.lambda, mean_cost, t.cost_limit, t.lagrangian_lr);
        ckpt.steps_done += steps;
        ckpt.epochs_done += 1;
        writer.emit(MetricsRecord::Epoch(EpochMetrics {
            epoch,
            total_steps: ckpt.steps_done,
            episodes: results.len(),
            mean_return: results.iter().map(|r| r.return_).sum::<f64>() / n,
            mean_cost_rate: results.iter().map(|r| r.cost_rate()).sum::<f64>() / n,
            mean_episode_cost: mean_cost,
            shield_trigger_rate: results.iter().map(|r| r.interventions as f64).sum::<f64>() / steps.max(1) as f64,
            lambda: ckpt.lambda,
            policy_kl: diag.kl,
            clip_fraction: diag.clip_fraction,
            policy_epochs: diag.epochs_run,
            loss_v_r: losses.v_r,
            loss_v_c: losses.v_c,
            loss_q_c: sro.then_some(losses.q_c),
            mean_q_safe: diag.mean_q_safe,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        }))?;
        writer.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::pretrain::pretrain_fe;

    fn tiny(shield: bool) -> (ExperimentConfig, Option<BasisSet>) {
        let mut cfg = ExperimentConfig::default();
        cfg.env.horizon = 40;
        cfg.train.steps_per_epoch = 80;
        cfg.train.minibatch = 32;
        cfg.train.hidden = vec![8];
        cfg.experiment.total_steps = 160;
        cfg.experiment.shield_enabled = shield;
        cfg.fe.episodes = 6;
        cfg.fe.heldout_episodes = 1;
        cfg.fe.steps_per_episode = 40;
        cfg.fe.epochs = 5;
        cfg.fe.hidden = vec![8];
        let (basis, _) = pretrain_fe(&cfg).unwrap();
        (cfg, Some(basis))
    }

    fn stripped(w: &MetricsWriter) -> Vec<MetricsRecord> {
        w.records.iter().map(MetricsRecord::without_timing).collect()
    }

    #[test]
    fn checkpoint_round_trips() {
        let (cfg, basis) = tiny(true);
        let mut w = MetricsWriter::memory();
        let ckpt = train(&cfg, basis, &mut w).unwrap();
        assert_eq!(ckpt.epochs_done, 2);
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let mut bad: serde_json::Value = serde_json::from_str(&ckpt.to_json().unwrap()).unwrap();
        bad["version"] = 99.into();
        assert!(matches!(
            Checkpoint::from_json(&bad.to_string()),
            Err(Error::Version(_))
        ));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, basis) = tiny(true);
        let mut full_w = MetricsWriter::memory();
        let full = train(&cfg, basis.clone(), &mut full_w).unwrap();

        let mut w = MetricsWriter::memory();
        let mut part = Checkpoint::initial(&cfg, basis).unwrap();
        train_from(&mut part, 1, &mut w).unwrap();
        let mut part = Checkpoint::from_json(&part.to_json().unwrap()).unwrap();
        train_from(&mut part, 2, &mut w).unwrap();
        assert_eq!(part, full);
        assert_eq!(stripped(&w), stripped(&full_w)[1..].to_vec());
    }

    #[test]
    fn needs_basis_when_shielded() {
        let cfg = ExperimentConfig::default();
        assert!(Checkpoint::initial(&cfg, None).is_err());
    }

    #[test]
    fn zero_alpha_reproduces_plain_lagrangian() {
        let (mut cfg, basis) = tiny(false);
        cfg.train.alpha = 0.0;
        cfg.train.lagrangian_init = 0.3;
        let mut plain_cfg = cfg.clone();
        plain_cfg.experiment.sro_enabled = false;
        let mut a = MetricsWriter::memory();
        let mut b = MetricsWriter::memory();
        let ca = train(&cfg, basis.clone(), &mut a).unwrap();
        let cb = train(&plain_cfg, basis, &mut b).unwrap();
        let base = |w: &MetricsWriter| w.records.iter().map(MetricsRecord::base_fields).collect::<Vec<_>>();
        assert_eq!(base(&a), base(&b));
        assert_eq!(ca.policy, cb.policy);
        assert_eq!(ca.lambda, cb.lambda);
    }
}
