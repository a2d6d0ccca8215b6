use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Generalized advantage estimation over one episode segment.
///
/// `bootstrap` is the value of the state after the last step (zero for a true
/// terminal). Returns `(advantages, targets)` with `targets = advantages +
/// values`.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("gae values", rewards.len(), values.len())?;
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Policy input: observation ⧺ context.
    pub input: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub cost: f64,
    pub v_r: f64,
    pub v_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Segment {
    start: usize,
    end: usize,
    boot_r: f64,
    boot_c: f64,
}

/// On-policy storage with per-segment GAE.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    pub steps: Vec<Step>,
    segments: Vec<Segment>,
    open: usize,
    pub adv_r: Vec<f64>,
    pub adv_c: Vec<f64>,
    pub ret_r: Vec<f64>,
    pub ret_c: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, step: Step) {
        self.steps.push(step);
    }

    /// Closes the current segment. `boot_*` are the values of the state the
    /// segment stopped in (zero for a true terminal).
    pub fn finish_segment(&mut self, boot_r: f64, boot_c: f64) {
        if self.open < self.steps.len() {
            self.segments.push(Segment {
                start: self.open,
                end: self.steps.len(),
                boot_r,
                boot_c,
            });
            self.open = self.steps.len();
        }
    }

    pub fn compute(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        if self.open != self.steps.len() {
            return Err(Error::StateMachine("advantages requested with an open segment"));
        }
        let n = self.steps.len();
        self.adv_r = vec![0.0; n];
        self.adv_c = vec![0.0; n];
        self.ret_r = vec![0.0; n];
        self.ret_c = vec![0.0; n];
        for seg in &self.segments {
            let steps = &self.steps[seg.start..seg.end];
            let r: Vec<f64> = steps.iter().map(|s| s.reward).collect();
            let vr: Vec<f64> = steps.iter().map(|s| s.v_r).collect();
            let c: Vec<f64> = steps.iter().map(|s| s.cost).collect();
            let vc: Vec<f64> = steps.iter().map(|s| s.v_c).collect();
            let (ar, tr) = gae(&r, &vr, seg.boot_r, gamma, lambda)?;
            let (ac, tc) = gae(&c, &vc, seg.boot_c, gamma, lambda)?;
            self.adv_r[seg.start..seg.end].copy_from_slice(&ar);
            self.ret_r[seg.start..seg.end].copy_from_slice(&tr);
            self.adv_c[seg.start..seg.end].copy_from_slice(&ac);
            self.ret_c[seg.start..seg.end].copy_from_slice(&tc);
        }
        Ok(())
    }

    /// Reward advantages standardized to zero mean and unit std.
    pub fn normalized_adv_r(&self) -> Vec<f64> {
        normalize(&self.adv_r)
    }
}

fn normalize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    x.iter().map(|v| (v - mean) / sd).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(r: &[f64], v: &[f64], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        let value = |t: usize| if t < n { v[t] } else { boot };
        (0..n)
            .map(|t| {
                (t..n)
                    .map(|l| {
                        let delta = r[l] + gamma * value(l + 1) - v[l];
                        (gamma * lambda).powi((l - t) as i32) * delta
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn telescoping_reduction() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let (adv, _) = gae(&r, &[0.0; 4], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![10.0, 9.0, 7.0, 4.0]);
    }

    #[test]
    fn single_step() {
        let (adv, tgt) = gae(&[0.5], &[0.2], 1.0, 0.9, 0.95).unwrap();
        assert!((adv[0] - (0.5 + 0.9 - 0.2)).abs() < 1e-15);
        assert!((tgt[0] - (0.5 + 0.9)).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let n = rng.random_range(1..60);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let boot = rng.random_range(-1.0..1.0);
            let (adv, _) = gae(&r, &v, boot, 0.99, 0.95).unwrap();
            for (a, b) in adv.iter().zip(brute_force(&r, &v, boot, 0.99, 0.95)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn length_mismatch() {
        assert!(gae(&[1.0], &[], 0.0, 0.9, 0.9).is_err());
    }

    fn step(reward: f64, cost: f64) -> Step {
        Step {
            input: vec![0.0],
            action: vec![0.0],
            log_prob: 0.0,
            reward,
            cost,
            v_r: 0.0,
            v_c: 0.0,
        }
    }

    #[test]
    fn segments_do_not_leak() {
        let mut b = RolloutBuffer::new();
        b.push(step(1.0, 0.0));
        b.push(step(1.0, 1.0));
        assert!(b.compute(1.0, 1.0).is_err());
        b.finish_segment(0.0, 0.0);
        b.push(step(5.0, 0.0));
        b.finish_segment(0.0, 0.0);
        b.finish_segment(9.0, 9.0); // no-op on an empty segment
        b.compute(1.0, 1.0).unwrap();
        assert_eq!(b.adv_r, vec![2.0, 1.0, 5.0]);
        assert_eq!(b.adv_c, vec![1.0, 1.0, 0.0]);
        let n = b.normalized_adv_r();
        assert!(n.iter().sum::<f64>().abs() < 1e-12);
    }
}
