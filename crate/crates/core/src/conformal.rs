//! Adaptive conformal radius for next-state prediction error.
//!
//! Each episode starts with a warm-up phase that only collects nonconformity
//! scores. Once `warmup_len` scores are in, the radius is initialized to the
//! split-conformal quantile of the warm-up scores and from then on adapts
//! online with `Γ ← max(0, Γ + η (miss - δ))`, which drives the long-run miss
//! rate toward `δ`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcpConfig {
    pub delta: f64,
    pub warmup_len: usize,
    /// Step size as a fraction of the warm-up quantile.
    pub eta_scale: f64,
    /// Below this many warm-up scores the radius is infinite.
    pub min_scores: usize,
}

impl Default for AcpConfig {
    fn default() -> Self {
        Self {
            delta: 0.02,
            warmup_len: 100,
            eta_scale: 0.05,
            min_scores: 5,
        }
    }
}

impl AcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "acp.delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.eta_scale > 0.0) || self.warmup_len == 0 {
            return Err(Error::Config(
                "acp.eta_scale and acp.warmup_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Euclidean norm of the prediction error.
pub fn score(true_next: &[f64], predicted_next: &[f64]) -> Result<f64> {
    check_len("conformal score", true_next.len(), predicted_next.len())?;
    Ok(true_next
        .iter()
        .zip(predicted_next)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// The `q`-th order statistic with `q = ⌈(n+1)(1-δ)⌉`, clamped to `n`.
pub fn warmup_quantile(scores: &[f64], delta: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty score list".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    let n = scores.len();
    let q = (((n + 1) as f64 * (1.0 - delta)) - 1e-9).ceil() as usize;
    let q = q.clamp(1, n);
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[q - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcpState {
    pub gamma: f64,
    pub delta: f64,
    pub eta: f64,
    calibration: Vec<f64>,
    warmed_up: bool,
    miss_count: usize,
    step_count: usize,
    warmup_len: usize,
    eta_scale: f64,
    min_scores: usize,
}

impl AcpState {
    pub fn new(cfg: &AcpConfig) -> Self {
        Self {
            gamma: f64::INFINITY,
            delta: cfg.delta,
            eta: 0.0,
            calibration: Vec::with_capacity(cfg.warmup_len),
            warmed_up: false,
            miss_count: 0,
            step_count: 0,
            warmup_len: cfg.warmup_len,
            eta_scale: cfg.eta_scale,
            min_scores: cfg.min_scores,
        }
    }

    /// A state that skips warm-up and starts adapting from `gamma`.
    pub fn calibrated(gamma: f64, eta: f64, delta: f64) -> Self {
        Self {
            gamma: gamma.max(0.0),
            delta,
            eta,
            calibration: Vec::new(),
            warmed_up: true,
            miss_count: 0,
            step_count: 0,
            warmup_len: 0,
            eta_scale: 0.0,
            min_scores: 0,
        }
    }

    pub fn warmed_up(&self) -> bool {
        self.warmed_up
    }

    pub fn calibration(&self) -> &[f64] {
        &self.calibration
    }

    pub fn miss_count(&self) -> usize {
        self.miss_count
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Fraction of post-warm-up scores that exceeded the radius.
    pub fn miss_rate(&self) -> f64 {
        if self.step_count == 0 {
            0.0
        } else {
            self.miss_count as f64 / self.step_count as f64
        }
    }

    /// Radius the shield should use right now. During warm-up this is the
    /// running split-conformal quantile, or `+∞` with too few scores.
    pub fn radius(&self) -> f64 {
        if self.warmed_up {
            self.gamma
        } else if self.calibration.len() < self.min_scores.max(1) {
            f64::INFINITY
        } else {
            warmup_quantile(&self.calibration, self.delta).unwrap_or(f64::INFINITY)
        }
    }

    /// Feeds one score: collected during warm-up, adapted on afterwards.
    pub fn observe(&mut self, s: f64) -> Result<()> {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::NonFinite("nonconformity score"));
        }
        if self.warmed_up {
            return self.update(s);
        }
        self.calibration.push(s);
        if self.calibration.len() >= self.warmup_len {
            let q = warmup_quantile(&self.calibration, self.delta)?;
            self.gamma = q;
            self.eta = self.eta_scale * q.max(f64::EPSILON);
            self.warmed_up = true;
        }
        Ok(())
    }

    /// One adaptive step on a post-warm-up score.
    pub fn update(&mut self, s: f64) -> Result<()> {
        if !self.warmed_up {
            return Err(Error::StateMachine("adaptive update before warm-up finished"));
        }
        let miss = s > self.gamma;
        self.gamma = (self.gamma + self.eta * (f64::from(u8::from(miss)) - self.delta)).max(0.0);
        self.miss_count += usize::from(miss);
        self.step_count += 1;
        Ok(())
    }

    /// Clears calibration and counters at an episode boundary.
    pub fn reset_episode(&mut self) {
        let cfg = AcpConfig {
            delta: self.delta,
            warmup_len: self.warmup_len,
            eta_scale: self.eta_scale,
            min_scores: self.min_scores,
        };
        *self = Self::new(&cfg);
    }
}
