use rand::Rng;
use rand_distr::StandardNormal;

use super::{CriticSet, GaussianPolicy, RolloutBuffer, TrainConfig};
use crate::error::{Error, Result};

/// Lower clamp of the regularizer; the open end of `(-1, 0]`.
pub const Q_SAFE_FLOOR: f64 = -1.0 + 1e-6;

/// Monte-Carlo safety regularizer around `action`:
///
/// `clamp(-mean_i π(a_i|s)·max(Q_C(s, a_i), 0) / (max(V_C(s), 0) + eps),
/// Q_SAFE_FLOOR, 0)` with `a_i = action + σ ε_i`.
///
/// `v_c` is supplied by the caller and treated as a constant.
pub fn q_safe_estimate<R: Rng + ?Sized>(
    input: &[f64],
    action: &[f64],
    policy: &GaussianPolicy,
    critics: &CriticSet,
    v_c: f64,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    if cfg.n_safe_samples == 0 {
        return Err(Error::InvalidArgument(
            "q_safe needs at least one perturbation sample".into(),
        ));
    }
    let mut total = 0.0;
    let mut perturbed = vec![0.0; action.len()];
    for _ in 0..cfg.n_safe_samples {
        for (p, a) in perturbed.iter_mut().zip(action) {
            *p = a + cfg.sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let q = critics.q_cost(input, &perturbed)?.max(0.0);
        if q > 0.0 {
            total += policy.density(input, &perturbed)? * q;
        }
    }
    let m = total / cfg.n_safe_samples as f64;
    let value = -m / (v_c.max(0.0) + cfg.eps_num);
    if value.is_nan() {
        return Err(Error::NonFinite("q_safe"));
    }
    Ok(value.clamp(Q_SAFE_FLOOR, 0.0))
}

/// Regularizer for every step of a buffer, using the current cost critic.
pub fn q_safe_batch<R: Rng + ?Sized>(
    buffer: &RolloutBuffer,
    policy: &GaussianPolicy,
    critics: &CriticSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    buffer
        .steps
        .iter()
        .map(|s| {
            let v_c = critics.value_c(&s.input)?;
            q_safe_estimate(&s.input, &s.action, policy, critics, v_c, cfg, rng)
        })
        .collect()
}
