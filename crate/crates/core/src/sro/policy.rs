use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::Mlp;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian policy with a state-independent log-std. The mean is
/// `tanh` of the network output, so it stays inside the action box and
/// samples keep covering it instead of piling up on the clip boundary.
///
/// Flat parameter layout: mean-network parameters, then the log-std vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend(hidden);
        sizes.push(action_dim);
        let mut mean = Mlp::new(&sizes, rng)?;
        // small initial means so early behaviour is driven by the noise
        let last = mean.layer_count() - 1;
        mean.layer_mut(last).0.iter_mut().for_each(|w| *w *= 0.01);
        Ok(Self {
            mean,
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); action_dim],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn num_params(&self) -> usize {
        self.mean.num_params() + self.log_std.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.mean.params().to_vec();
        p.extend(&self.log_std);
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        check_len("policy parameters", self.num_params(), p.len())?;
        let m = self.mean.num_params();
        self.mean.params_mut().copy_from_slice(&p[..m]);
        self.log_std.copy_from_slice(&p[m..]);
        self.project();
        Ok(())
    }

    /// Clamps the log-std into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn project(&mut self) {
        self.log_std
            .iter_mut()
            .for_each(|s| *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    pub fn mean_action(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut mu = self.mean.forward(input)?;
        mu.iter_mut().for_each(|v| *v = v.tanh());
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy mean"));
        }
        Ok(mu)
    }

    fn log_density(mu: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
        mu.iter()
            .zip(log_std)
            .zip(action)
            .map(|((m, s), a)| {
                let z = (a - m) / s.exp();
                -0.5 * z * z - s - 0.5 * LN_2PI
            })
            .sum()
    }

    pub fn log_prob(&self, input: &[f64], action: &[f64]) -> Result<f64> {
        check_len("action", self.action_dim(), action.len())?;
        let mu = self.mean_action(input)?;
        Ok(Self::log_density(&mu, &self.log_std, action))
    }

    pub fn density(&self, input: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.log_prob(input, action)?.exp())
    }

    /// Samples an action and returns it with its log-density.
    pub fn act<R: Rng + ?Sized>(&self, input: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let mu = self.mean_action(input)?;
        Ok(self.sample_around(&mu, rng))
    }

    /// Like [`act`](Self::act) with a precomputed mean; draws the same noise.
    pub fn sample_around<R: Rng + ?Sized>(&self, mu: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
        let a: Vec<f64> = mu
            .iter()
            .zip(&self.log_std)
            .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = Self::log_density(mu, &self.log_std, &a);
        (a, lp)
    }

    /// Adds `scale · ∇_θ log π(action | input)` into `grad` (flat layout) and
    /// returns the log-density.
    pub fn log_prob_grad(&self, input: &[f64], action: &[f64], scale: f64, grad: &mut [f64]) -> Result<f64> {
        check_len("policy gradient buffer", self.num_params(), grad.len())?;
        check_len("action", self.action_dim(), action.len())?;
        let trace = self.mean.forward_trace(input)?;
        let mu: Vec<f64> = trace.output().iter().map(|v| v.tanh()).collect();
        let m = self.mean.num_params();
        let mut upstream = vec![0.0; mu.len()];
        for i in 0..mu.len() {
            let var = (2.0 * self.log_std[i]).exp();
            let d = action[i] - mu[i];
            upstream[i] = scale * d / var * (1.0 - mu[i] * mu[i]);
            grad[m + i] += scale * (d * d / var - 1.0);
        }
        let lp = Self::log_density(&mu, &self.log_std, action);
        self.mean.backward_trace(&trace, &upstream, &mut grad[..m])?;
        Ok(lp)
    }
}
