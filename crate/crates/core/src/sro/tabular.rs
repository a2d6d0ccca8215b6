//! Two-state, two-action tabular problems with hidden parameters, evaluated by
//! exhaustive trajectory enumeration. Used to check that the safety
//! regularizer leaves the ranking of zero-cost policies untouched.

use serde::{Deserialize, Serialize};

use super::Q_SAFE_FLOOR;
use crate::error::{Error, Result};

pub const S: usize = 2;
pub const A: usize = 2;

/// `policy[s][a] = π(a | s)`.
pub type TabularPolicy = [[f64; A]; S];
/// Per-(state, action) table.
pub type Table = [[f64; A]; S];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    /// `p[s][a][s']`.
    pub p: [[[f64; S]; A]; S],
    pub reward: Table,
    pub cost: Table,
    pub initial: [f64; S],
}

/// A finite mixture over hidden parameters: `(weight, mdp)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularChip {
    pub tasks: Vec<(f64, TabularMdp)>,
    pub horizon: usize,
    pub gamma: f64,
}

impl TabularChip {
    /// Moving to state 1 pays more reward, and the high-reward action in
    /// state 1 is the only costly one. The hidden parameter scales how sticky
    /// each state is.
    pub fn example() -> Self {
        let mdp = |stick: f64| TabularMdp {
            p: [
                [[0.5 + 0.4 * stick, 0.5 - 0.4 * stick], [0.3, 0.7]],
                [[0.6 - 0.3 * stick, 0.4 + 0.3 * stick], [0.1, 0.9]],
            ],
            reward: [[0.1, 0.2], [0.5, 1.0]],
            cost: [[0.0, 0.0], [0.0, 1.0]],
            initial: [0.8, 0.2],
        };
        Self {
            tasks: vec![(0.5, mdp(0.2)), (0.5, mdp(0.9))],
            horizon: 10,
            gamma: 0.95,
        }
    }
}

/// Cost action-values and values per time step, by backward recursion.
pub fn cost_values(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    horizon: usize,
    gamma: f64,
) -> (Vec<Table>, Vec<[f64; S]>) {
    let mut q = vec![[[0.0; A]; S]; horizon];
    let mut v = vec![[0.0; S]; horizon + 1];
    for t in (0..horizon).rev() {
        for s in 0..S {
            for a in 0..A {
                let next: f64 = (0..S).map(|n| mdp.p[s][a][n] * v[t + 1][n]).sum();
                q[t][s][a] = mdp.cost[s][a] + gamma * next;
            }
            v[t][s] = (0..A).map(|a| policy[s][a] * q[t][s][a]).sum();
        }
    }
    v.truncate(horizon);
    (q, v)
}

/// Tabular regularizer: the perturbation average runs over the whole action
/// set, `clamp(-mean_a' π(a'|s)·max(Q_C(s,a'), 0) / (max(V_C(s), 0) + eps), floor, 0)`.
/// It does not depend on the taken action.
pub fn q_safe_tabular(policy: &TabularPolicy, q_c: &Table, v_c: &[f64; S], eps: f64) -> Table {
    let mut out = [[0.0; A]; S];
    for s in 0..S {
        let m: f64 = (0..A).map(|a| policy[s][a] * q_c[s][a].max(0.0)).sum::<f64>() / A as f64;
        let v = (-m / (v_c[s].max(0.0) + eps)).clamp(Q_SAFE_FLOOR, 0.0);
        out[s] = [v; A];
    }
    out
}

/// Expected discounted return of `reward + α·bonus_t` by enumerating every
/// state-action trajectory of length `horizon`.
pub fn enumerate_objective(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    horizon: usize,
    gamma: f64,
    bonus: Option<(&[Table], f64)>,
) -> f64 {
    fn walk(
        mdp: &TabularMdp,
        policy: &TabularPolicy,
        horizon: usize,
        gamma: f64,
        bonus: Option<(&[Table], f64)>,
        t: usize,
        s: usize,
        prob: f64,
    ) -> f64 {
        if t == horizon || prob == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for a in 0..A {
            let pa = prob * policy[s][a];
            if pa == 0.0 {
                continue;
            }
            let mut r = mdp.reward[s][a];
            if let Some((b, alpha)) = bonus {
                if alpha != 0.0 {
                    r += alpha * b[t][s][a];
                }
            }
            total += pa * gamma.powi(t as i32) * r;
            for n in 0..S {
                total += walk(mdp, policy, horizon, gamma, bonus, t + 1, n, pa * mdp.p[s][a][n]);
            }
        }
        total
    }
    (0..S)
        .map(|s| walk(mdp, policy, horizon, gamma, bonus, 0, s, mdp.initial[s]))
        .sum()
}

/// Reward objective `J_R` and augmented objective `J_aug` averaged over the
/// hidden-parameter mixture.
pub fn objectives(chip: &TabularChip, policy: &TabularPolicy, alpha: f64, eps: f64) -> Result<(f64, f64)> {
    if chip.tasks.is_empty() || chip.horizon == 0 {
        return Err(Error::InvalidArgument("empty tabular problem".into()));
    }
    let mut j_r = 0.0;
    let mut j_aug = 0.0;
    for (w, mdp) in &chip.tasks {
        let (q, v) = cost_values(mdp, policy, chip.horizon, chip.gamma);
        let bonus: Vec<Table> = q
            .iter()
            .zip(&v)
            .map(|(qt, vt)| q_safe_tabular(policy, qt, vt, eps))
            .collect();
        j_r += w * enumerate_objective(mdp, policy, chip.horizon, chip.gamma, None);
        j_aug += w * enumerate_objective(mdp, policy, chip.horizon, chip.gamma, Some((&bonus, alpha)));
    }
    Ok((j_r, j_aug))
}

/// Policies with `π(a=1 | s) = p_s` over a grid with `steps + 1` points per
/// state; `zero_cost` pins `p_1 = 0`.
pub fn policy_grid(steps: usize, zero_cost: bool) -> Vec<TabularPolicy> {
    let mut out = Vec::new();
    let grid: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    for &p0 in &grid {
        let ones: Vec<f64> = if zero_cost { vec![0.0] } else { grid.clone() };
        for &p1 in &ones {
            out.push([[1.0 - p0, p0], [1.0 - p1, p1]]);
        }
    }
    out
}

/// Index of the first maximizer.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_matches_dynamic_programming() {
        let chip = TabularChip::example();
        let policy = [[0.3, 0.7], [0.6, 0.4]];
        for (_, mdp) in &chip.tasks {
            let mut v = [0.0; S];
            for _ in 0..chip.horizon {
                let mut nv = [0.0; S];
                for s in 0..S {
                    for a in 0..A {
                        let next: f64 = (0..S).map(|n| mdp.p[s][a][n] * v[n]).sum();
                        nv[s] += policy[s][a] * (mdp.reward[s][a] + chip.gamma * next);
                    }
                }
                v = nv;
            }
            let dp: f64 = (0..S).map(|s| mdp.initial[s] * v[s]).sum();
            let en = enumerate_objective(mdp, &policy, chip.horizon, chip.gamma, None);
            assert!((dp - en).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cost_policies_get_no_bonus() {
        let chip = TabularChip::example();
        for policy in policy_grid(10, true) {
            for alpha in [0.0, 0.5, 1.0, 10.0] {
                let (j_r, j_aug) = objectives(&chip, &policy, alpha, 1e-3).unwrap();
                assert_eq!(j_r, j_aug);
            }
        }
    }

    #[test]
    fn costly_policies_are_penalized() {
        let chip = TabularChip::example();
        let policy = [[0.5, 0.5], [0.5, 0.5]];
        let (j_r, j_aug) = objectives(&chip, &policy, 1.0, 1e-3).unwrap();
        assert!(j_aug < j_r);
    }

    #[test]
    fn argmax_picks_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
