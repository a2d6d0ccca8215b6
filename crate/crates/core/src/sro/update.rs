use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{augmented_advantage, CriticSet, GaussianPolicy, RolloutBuffer, TrainConfig};
use crate::error::{check_len, Error, Result};
use crate::numerics::{clip_grad_norm, Adam, Mlp};

/// Per-step policy advantage `A_aug - λ A_C`, with `A_aug = norm(A_R) + α Q_safe`.
/// `q_safe = None` is the plain Lagrangian path.
pub fn policy_advantages(buffer: &RolloutBuffer, q_safe: Option<&[f64]>, alpha: f64, lambda: f64) -> Result<Vec<f64>> {
    check_len("cost advantages", buffer.len(), buffer.adv_c.len())?;
    let a_r = buffer.normalized_adv_r();
    check_len("reward advantages", buffer.len(), a_r.len())?;
    if let Some(q) = q_safe {
        check_len("q_safe values", buffer.len(), q.len())?;
    }
    Ok(a_r
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let aug = match q_safe {
                Some(q) => augmented_advantage(a, q[i], alpha),
                None => a,
            };
            aug - lambda * buffer.adv_c[i]
        })
        .collect())
}

/// Clipped surrogate loss (to minimize) on the steps `idx` and its gradient in
/// the policy's flat parameter layout.
pub fn surrogate_loss_and_grad(
    policy: &GaussianPolicy,
    buffer: &RolloutBuffer,
    adv: &[f64],
    idx: &[usize],
    clip: f64,
) -> Result<(f64, Vec<f64>)> {
    check_len("advantages", buffer.len(), adv.len())?;
    let mut grad = vec![0.0; policy.num_params()];
    if idx.is_empty() {
        return Ok((0.0, grad));
    }
    let b = idx.len() as f64;
    let mut loss = 0.0;
    let mut scratch = vec![0.0; policy.num_params()];
    for &i in idx {
        let s = &buffer.steps[i];
        scratch.iter_mut().for_each(|g| *g = 0.0);
        let lp = policy.log_prob_grad(&s.input, &s.action, 1.0, &mut scratch)?;
        let ratio = (lp - s.log_prob).exp();
        let a = adv[i];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        loss -= unclipped.min(clipped) / b;
        let active = if a >= 0.0 {
            ratio <= 1.0 + clip
        } else {
            ratio >= 1.0 - clip
        };
        if active {
            let scale = -a * ratio / b;
            grad.iter_mut().zip(&scratch).for_each(|(g, d)| *g += scale * d);
        }
    }
    Ok((loss, grad))
}

/// Sample estimate of `KL(π_old ‖ π)` and the fraction of clipped ratios.
fn kl_and_clip_fraction(policy: &GaussianPolicy, buffer: &RolloutBuffer, clip: f64) -> Result<(f64, f64)> {
    if buffer.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut kl = 0.0;
    let mut clipped = 0usize;
    for s in &buffer.steps {
        let lp = policy.log_prob(&s.input, &s.action)?;
        kl += s.log_prob - lp;
        clipped += usize::from(((lp - s.log_prob).exp() - 1.0).abs() > clip);
    }
    let n = buffer.len() as f64;
    Ok((kl / n, clipped as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDiagnostics {
    pub kl: f64,
    pub clip_fraction: f64,
    pub epochs_run: usize,
    pub mean_q_safe: Option<f64>,
}

/// Minibatch clipped-surrogate updates over `update_epochs` passes with early
/// stopping once the mean KL exceeds `kl_max`. On a non-finite loss the policy
/// and optimizer are restored and an error is returned.
pub fn policy_update<R: Rng + ?Sized>(
    buffer: &RolloutBuffer,
    policy: &mut GaussianPolicy,
    adam: &mut Adam,
    q_safe: Option<&[f64]>,
    lambda: f64,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PolicyDiagnostics> {
    let adv = policy_advantages(buffer, q_safe, cfg.alpha, lambda)?;
    let backup = (policy.clone(), adam.clone());
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut epochs_run = 0;
    for epoch in 0..cfg.update_epochs {
        if epoch > 0 && kl_and_clip_fraction(policy, buffer, cfg.clip_ratio)?.0 > cfg.kl_max {
            break;
        }
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let (loss, mut grad) = match surrogate_loss_and_grad(policy, buffer, &adv, chunk, cfg.clip_ratio) {
                Ok(v) => v,
                Err(e) => {
                    (*policy, *adam) = backup;
                    return Err(e);
                }
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                (*policy, *adam) = backup;
                return Err(Error::NonFinite("policy loss"));
            }
            if cfg.max_grad_norm > 0.0 {
                clip_grad_norm(&mut grad, cfg.max_grad_norm);
            }
            let mut params = policy.flat_params();
            adam.step(&mut params, &grad)?;
            policy.set_flat_params(&params)?;
        }
        epochs_run += 1;
    }
    let (kl, clip_fraction) = kl_and_clip_fraction(policy, buffer, cfg.clip_ratio)?;
    Ok(PolicyDiagnostics {
        kl,
        clip_fraction,
        epochs_run,
        mean_q_safe: q_safe.map(|q| {
            if q.is_empty() {
                0.0
            } else {
                q.iter().sum::<f64>() / q.len() as f64
            }
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticLosses {
    pub v_r: f64,
    pub v_c: f64,
    pub q_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticOptimizers {
    pub v_r: Adam,
    pub v_c: Adam,
    pub q_c: Adam,
}

impl CriticOptimizers {
    pub fn new(critics: &CriticSet, lr: f64) -> Self {
        Self {
            v_r: Adam::new(critics.v_r.num_params(), lr),
            v_c: Adam::new(critics.v_c.num_params(), lr),
            q_c: Adam::new(critics.q_c.num_params(), lr),
        }
    }
}

fn q_input(step: &super::Step) -> Vec<f64> {
    let mut x = step.input.clone();
    x.extend_from_slice(&step.action);
    x
}

/// Squared-error loss of a scalar network on `(input, target)` pairs, with
/// the gradient accumulated into `grad`.
fn regression_grad(net: &Mlp, pairs: &[(Vec<f64>, f64)], grad: &mut [f64]) -> Result<f64> {
    let b = pairs.len().max(1) as f64;
    let mut loss = 0.0;
    for (x, target) in pairs {
        let trace = net.forward_trace(x)?;
        let err = trace.output()[0] - target;
        loss += err * err / b;
        net.backward_trace(&trace, &[2.0 * err / b], grad)?;
    }
    Ok(loss)
}

/// Critic losses on `idx` and their gradients `[v_r, v_c, q_c]`.
///
/// The Q_C target is `V_C(s) + A_C` with `V_C` evaluated at the current
/// parameters and held constant: no gradient reaches the cost value network
/// through the Q_C loss.
pub fn critic_loss_grads(
    critics: &CriticSet,
    buffer: &RolloutBuffer,
    idx: &[usize],
) -> Result<(CriticLosses, [Vec<f64>; 3])> {
    let mut g_r = vec![0.0; critics.v_r.num_params()];
    let mut g_c = vec![0.0; critics.v_c.num_params()];
    let mut g_q = vec![0.0; critics.q_c.num_params()];
    let vr: Vec<(Vec<f64>, f64)> = idx
        .iter()
        .map(|&i| (buffer.steps[i].input.clone(), buffer.ret_r[i]))
        .collect();
    let vc: Vec<(Vec<f64>, f64)> = idx
        .iter()
        .map(|&i| (buffer.steps[i].input.clone(), buffer.ret_c[i]))
        .collect();
    let qc: Vec<(Vec<f64>, f64)> = idx
        .iter()
        .map(|&i| {
            let s = &buffer.steps[i];
            Ok((q_input(s), critics.value_c(&s.input)? + buffer.adv_c[i]))
        })
        .collect::<Result<_>>()?;
    let losses = CriticLosses {
        v_r: regression_grad(&critics.v_r, &vr, &mut g_r)?,
        v_c: regression_grad(&critics.v_c, &vc, &mut g_c)?,
        q_c: regression_grad(&critics.q_c, &qc, &mut g_q)?,
    };
    Ok((losses, [g_r, g_c, g_q]))
}

/// Full-buffer critic losses.
pub fn critic_losses(critics: &CriticSet, buffer: &RolloutBuffer) -> Result<CriticLosses> {
    let idx: Vec<usize> = (0..buffer.len()).collect();
    Ok(critic_loss_grads(critics, buffer, &idx)?.0)
}

fn check_finite(l: &CriticLosses) -> Result<()> {
    if l.v_r.is_finite() && l.v_c.is_finite() && l.q_c.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("critic loss"))
    }
}

/// One Adam step of every critic on the minibatch `idx`. `train_q = false`
/// leaves the cost Q network untouched (plain Lagrangian path).
pub fn critic_step(
    critics: &mut CriticSet,
    opt: &mut CriticOptimizers,
    buffer: &RolloutBuffer,
    idx: &[usize],
    train_q: bool,
) -> Result<CriticLosses> {
    let (losses, [g_r, g_c, g_q]) = critic_loss_grads(critics, buffer, idx)?;
    check_finite(&losses)?;
    opt.v_r.step(critics.v_r.params_mut(), &g_r)?;
    opt.v_c.step(critics.v_c.params_mut(), &g_c)?;
    if train_q {
        opt.q_c.step(critics.q_c.params_mut(), &g_q)?;
    }
    Ok(losses)
}

/// One Adam step of the cost Q network alone.
pub fn q_c_step(
    critics: &mut CriticSet,
    opt: &mut CriticOptimizers,
    buffer: &RolloutBuffer,
    idx: &[usize],
) -> Result<f64> {
    let (losses, [_, _, g_q]) = critic_loss_grads(critics, buffer, idx)?;
    check_finite(&losses)?;
    opt.q_c.step(critics.q_c.params_mut(), &g_q)?;
    Ok(losses.q_c)
}

/// `update_epochs` shuffled minibatch passes; returns the mean minibatch
/// losses of the final pass.
pub fn critic_update<R: Rng + ?Sized>(
    critics: &mut CriticSet,
    opt: &mut CriticOptimizers,
    buffer: &RolloutBuffer,
    train_q: bool,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<CriticLosses> {
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut last = CriticLosses {
        v_r: 0.0,
        v_c: 0.0,
        q_c: 0.0,
    };
    for _ in 0..cfg.update_epochs {
        order.shuffle(rng);
        let mut sum = CriticLosses {
            v_r: 0.0,
            v_c: 0.0,
            q_c: 0.0,
        };
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let l = critic_step(critics, opt, buffer, chunk, train_q)?;
            sum.v_r += l.v_r;
            sum.v_c += l.v_c;
            sum.q_c += l.q_c;
            batches += 1.0;
        }
        if batches > 0.0 {
            last = CriticLosses {
                v_r: sum.v_r / batches,
                v_c: sum.v_c / batches,
                q_c: sum.q_c / batches,
            };
        }
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sro::Step;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_buffer(rng: &mut ChaCha8Rng, policy: &GaussianPolicy, n: usize) -> RolloutBuffer {
        let mut b = RolloutBuffer::new();
        for t in 0..n {
            let input: Vec<f64> = (0..policy.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (action, log_prob) = policy.act(&input, rng).unwrap();
            b.push(Step {
                input,
                action,
                log_prob,
                reward: rng.random_range(-1.0..1.0),
                cost: f64::from(u8::from(rng.random::<f64>() < 0.2)),
                v_r: rng.random_range(-0.5..0.5),
                v_c: rng.random_range(0.0..0.5),
            });
            if t % 17 == 16 {
                b.finish_segment(0.1, 0.05);
            }
        }
        b.finish_segment(0.0, 0.0);
        b.compute(0.99, 0.95).unwrap();
        b
    }

    fn setup(seed: u64) -> (ChaCha8Rng, GaussianPolicy, CriticSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = GaussianPolicy::new(4, 2, &[8], -0.5, &mut rng).unwrap();
        let last = policy.mean.layer_count() - 1;
        policy.mean.layer_mut(last).0.iter_mut().for_each(|w| *w *= 100.0);
        let (mut a, mut b, mut c) = (
            ChaCha8Rng::seed_from_u64(seed + 1),
            ChaCha8Rng::seed_from_u64(seed + 2),
            ChaCha8Rng::seed_from_u64(seed + 3),
        );
        let critics = CriticSet::new(4, 2, &[8], [&mut a, &mut b, &mut c]).unwrap();
        (rng, policy, critics)
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let (mut rng, mut policy, _) = setup(0);
        let buffer = random_buffer(&mut rng, &policy, 40);
        // move away from ratio = 1 so some samples are clipped
        let mut p = policy.flat_params();
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        policy.set_flat_params(&p).unwrap();
        let adv: Vec<f64> = (0..buffer.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let idx: Vec<usize> = (0..buffer.len()).collect();
        let (_, grad) = surrogate_loss_and_grad(&policy, &buffer, &adv, &idx, 0.2).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] += h;
            policy.set_flat_params(&q).unwrap();
            let up = surrogate_loss_and_grad(&policy, &buffer, &adv, &idx, 0.2).unwrap().0;
            q[i] -= 2.0 * h;
            policy.set_flat_params(&q).unwrap();
            let down = surrogate_loss_and_grad(&policy, &buffer, &adv, &idx, 0.2).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let (mut rng, mut policy, _) = setup(1);
        let mut buffer = random_buffer(&mut rng, &policy, 64);
        buffer.adv_r.iter_mut().for_each(|a| *a = 0.0);
        buffer.adv_c.iter_mut().for_each(|a| *a = 0.0);
        let before = policy.flat_params();
        let mut adam = Adam::new(policy.num_params(), 1e-3);
        policy_update(
            &buffer,
            &mut policy,
            &mut adam,
            None,
            0.5,
            &TrainConfig::default(),
            &mut rng,
        )
        .unwrap();
        let moved: f64 = before
            .iter()
            .zip(policy.flat_params())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(moved < 1e-8, "{moved}");
    }

    #[test]
    fn zero_alpha_matches_plain_path() {
        let (mut rng, policy, _) = setup(2);
        let buffer = random_buffer(&mut rng, &policy, 100);
        let q: Vec<f64> = (0..buffer.len()).map(|_| -rng.random::<f64>() * 0.99).collect();
        let cfg = TrainConfig {
            alpha: 0.0,
            ..TrainConfig::default()
        };
        let plain = policy_advantages(&buffer, None, 0.0, 0.3).unwrap();
        let sro = policy_advantages(&buffer, Some(&q), 0.0, 0.3).unwrap();
        assert_eq!(plain, sro);
        let (mut p1, mut p2) = (policy.clone(), policy.clone());
        let (mut a1, mut a2) = (
            Adam::new(policy.num_params(), 1e-3),
            Adam::new(policy.num_params(), 1e-3),
        );
        let (mut r1, mut r2) = (ChaCha8Rng::seed_from_u64(7), ChaCha8Rng::seed_from_u64(7));
        policy_update(&buffer, &mut p1, &mut a1, None, 0.3, &cfg, &mut r1).unwrap();
        policy_update(&buffer, &mut p2, &mut a2, Some(&q), 0.3, &cfg, &mut r2).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn regularizer_gradient_scales_with_q_safe() {
        let (mut rng, policy, _) = setup(3);
        let mut buffer = random_buffer(&mut rng, &policy, 50);
        buffer.adv_r.iter_mut().for_each(|a| *a = 0.0);
        buffer.adv_c.iter_mut().for_each(|a| *a = 0.0);
        let idx: Vec<usize> = (0..buffer.len()).collect();
        let base: Vec<f64> = (0..buffer.len()).map(|_| -rng.random::<f64>()).collect();
        let norm = |scale: f64| {
            let q: Vec<f64> = base.iter().map(|v| v * scale).collect();
            let adv = policy_advantages(&buffer, Some(&q), 1.0, 0.0).unwrap();
            let (_, g) = surrogate_loss_and_grad(&policy, &buffer, &adv, &idx, 0.2).unwrap();
            g.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let (n1, n2) = (norm(0.1), norm(0.2));
        assert!(n1 > 0.0);
        assert!((n2 / n1 - 2.0).abs() < 1e-9);
        assert_eq!(norm(0.0), 0.0);
    }

    #[test]
    fn non_finite_loss_restores_parameters() {
        let (mut rng, mut policy, _) = setup(4);
        let mut buffer = random_buffer(&mut rng, &policy, 30);
        buffer.adv_r[3] = f64::NAN;
        let before = policy.clone();
        let mut adam = Adam::new(policy.num_params(), 1e-3);
        let r = policy_update(
            &buffer,
            &mut policy,
            &mut adam,
            None,
            0.0,
            &TrainConfig::default(),
            &mut rng,
        );
        assert!(r.is_err());
        assert_eq!(policy, before);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn kl_early_stop() {
        let (mut rng, mut policy, _) = setup(5);
        let buffer = random_buffer(&mut rng, &policy, 200);
        let cfg = TrainConfig {
            update_epochs: 50,
            kl_max: 1e-4,
            minibatch: 50,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(policy.num_params(), 1e-2);
        let d = policy_update(&buffer, &mut policy, &mut adam, None, 0.0, &cfg, &mut rng).unwrap();
        assert!(d.epochs_run < 50);
        assert!(d.mean_q_safe.is_none());
    }

    #[test]
    fn perfect_critics_have_zero_loss() {
        let (mut rng, policy, critics) = setup(6);
        let mut buffer = random_buffer(&mut rng, &policy, 20);
        for i in 0..buffer.len() {
            let s = buffer.steps[i].clone();
            buffer.ret_r[i] = critics.value_r(&s.input).unwrap();
            buffer.ret_c[i] = critics.value_c(&s.input).unwrap();
            buffer.adv_c[i] = critics.q_cost(&s.input, &s.action).unwrap() - buffer.ret_c[i];
        }
        let l = critic_losses(&critics, &buffer).unwrap();
        assert!(l.v_r < 1e-28 && l.v_c < 1e-28 && l.q_c < 1e-28, "{l:?}");
    }

    #[test]
    fn critic_losses_decrease_on_frozen_buffer() {
        let (mut rng, policy, mut critics) = setup(7);
        let buffer = random_buffer(&mut rng, &policy, 128);
        let mut opt = CriticOptimizers::new(&critics, 3e-3);
        let start = critic_losses(&critics, &buffer).unwrap();
        let idx: Vec<usize> = (0..buffer.len()).collect();
        for _ in 0..100 {
            critic_step(&mut critics, &mut opt, &buffer, &idx, true).unwrap();
        }
        let end = critic_losses(&critics, &buffer).unwrap();
        assert!(
            end.v_r < start.v_r && end.v_c < start.v_c && end.q_c < start.q_c,
            "{start:?} -> {end:?}"
        );
    }

    #[test]
    fn q_step_leaves_cost_value_untouched() {
        let (mut rng, policy, mut critics) = setup(8);
        let buffer = random_buffer(&mut rng, &policy, 64);
        let mut opt = CriticOptimizers::new(&critics, 1e-2);
        let (v_r, v_c, q_c) = (critics.v_r.clone(), critics.v_c.clone(), critics.q_c.clone());
        let idx: Vec<usize> = (0..buffer.len()).collect();
        q_c_step(&mut critics, &mut opt, &buffer, &idx).unwrap();
        assert_eq!(critics.v_c, v_c);
        assert_eq!(critics.v_r, v_r);
        assert_ne!(critics.q_c, q_c);
        // and the plain path never moves Q_C
        critic_step(&mut critics, &mut opt, &buffer, &idx, false).unwrap();
        let q_after = critics.q_c.clone();
        critic_step(&mut critics, &mut opt, &buffer, &idx, false).unwrap();
        assert_eq!(critics.q_c, q_after);
    }

    fn net_mut(c: &mut CriticSet, which: usize) -> &mut Mlp {
        match which {
            0 => &mut c.v_r,
            1 => &mut c.v_c,
            _ => &mut c.q_c,
        }
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let (mut rng, policy, mut critics) = setup(9);
        let buffer = random_buffer(&mut rng, &policy, 16);
        let idx: Vec<usize> = (0..buffer.len()).collect();
        let (_, grads) = critic_loss_grads(&critics, &buffer, &idx).unwrap();
        let h = 1e-6;
        for which in 0..3 {
            let n = [
                critics.v_r.num_params(),
                critics.v_c.num_params(),
                critics.q_c.num_params(),
            ][which];
            for p in 0..n {
                let orig = net_mut(&mut critics, which).params()[p];
                let loss = |c: &CriticSet| {
                    let l = critic_loss_grads(c, &buffer, &idx).unwrap().0;
                    [l.v_r, l.v_c, l.q_c][which]
                };
                net_mut(&mut critics, which).params_mut()[p] = orig + h;
                let up = loss(&critics);
                net_mut(&mut critics, which).params_mut()[p] = orig - h;
                let down = loss(&critics);
                net_mut(&mut critics, which).params_mut()[p] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[which][p];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "critic {which} param {p}: fd {fd} analytic {an}");
            }
        }
    }
}
