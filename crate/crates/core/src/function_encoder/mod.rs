//! Neural basis functions for a family of transition dynamics.
//!
//! Every dynamics function in the family is represented as a linear
//! combination `Σ b_i g_i(s, a)` of `k` learned basis networks. The
//! coefficients `b` are the least-squares projection of observed transitions
//! onto the basis, computed from a `k × k` Gram matrix of Monte-Carlo inner
//! products `⟨u, v⟩ = (1/N) Σ_n u(x_n) · v(x_n)`. They serve both as the
//! dynamics model for one-step prediction and as a low-dimensional context
//! vector for the policy.
//!
//! Basis outputs are state deltas `s' - s` expressed in a standardized space:
//! inputs are shifted and scaled by the training-set statistics and targets
//! divided by a per-dimension scale. Inner products, coefficients and the
//! reported residuals all live in that space.

mod online;
mod training;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::HiddenParams;
use crate::error::{check_len, Error, Result};
use crate::numerics::{solve_ridge, Mlp};

pub use online::OnlineCoefficients;
pub use training::{basis_loss_and_grad, train_basis, BasisTrainConfig};

pub const BASIS_FORMAT: &str = "shieldrl-basis";
pub const BASIS_VERSION: u32 = 1;

/// Transitions collected under one hidden-parameter setting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    /// `s ⧺ a`
    pub inputs: Vec<Vec<f64>>,
    /// `s' - s`
    pub targets: Vec<Vec<f64>>,
}

impl TransitionDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, s: &[f64], a: &[f64], s_next: &[f64]) {
        let mut x = Vec::with_capacity(s.len() + a.len());
        x.extend_from_slice(s);
        x.extend_from_slice(a);
        self.inputs.push(x);
        self.targets.push(s_next.iter().zip(s).map(|(n, c)| n - c).collect());
    }

    pub fn push_pair(&mut self, input: Vec<f64>, target: Vec<f64>) {
        self.inputs.push(input);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Splits off the samples from `at` onwards.
    pub fn split_at(&self, at: usize) -> (Self, Self) {
        let at = at.min(self.len());
        (
            Self {
                inputs: self.inputs[..at].to_vec(),
                targets: self.targets[..at].to_vec(),
            },
            Self {
                inputs: self.inputs[at..].to_vec(),
                targets: self.targets[at..].to_vec(),
            },
        )
    }
}

/// Least-squares coefficients of one dynamics function on the basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub b: Vec<f64>,
    pub sample_count: usize,
    /// Mean squared reconstruction error over the samples used.
    pub residual: f64,
}

impl Coefficients {
    pub fn zeros(k: usize) -> Self {
        Self {
            b: vec![0.0; k],
            sample_count: 0,
            residual: 0.0,
        }
    }
}

/// Input standardization and output scaling, frozen after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            output_scale: vec![1.0; output_dim],
        }
    }

    pub fn fit(datasets: &[TransitionDataset]) -> Result<Self> {
        let first = datasets
            .iter()
            .find(|d| !d.is_empty())
            .ok_or_else(|| Error::InvalidArgument("no transitions to fit normalization".into()))?;
        let (din, dout) = (first.inputs[0].len(), first.targets[0].len());
        let n: usize = datasets.iter().map(|d| d.len()).sum();
        let mut mean = vec![0.0; din];
        let mut out_sq = vec![0.0; dout];
        for d in datasets {
            for (x, y) in d.inputs.iter().zip(&d.targets) {
                check_len("dataset input", din, x.len())?;
                check_len("dataset target", dout, y.len())?;
                mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
                out_sq.iter_mut().zip(y).for_each(|(m, v)| *m += v * v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; din];
        for d in datasets {
            for x in &d.inputs {
                var.iter_mut()
                    .zip(x.iter().zip(&mean))
                    .for_each(|(v, (a, m))| *v += (a - m).powi(2));
            }
        }
        let floor = |s: f64| if s > 1e-8 { s } else { 1.0 };
        Ok(Self {
            input_mean: mean,
            input_std: var.into_iter().map(|v| floor((v / n as f64).sqrt())).collect(),
            // root-mean-square keeps zero-mean deltas at unit scale
            output_scale: out_sq.into_iter().map(|v| floor((v / n as f64).sqrt())).collect(),
        })
    }

    pub fn input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Standardizes input coordinates `offset .. offset + x.len()`.
    pub fn input_part(&self, x: &[f64], offset: usize) -> Vec<f64> {
        x.iter()
            .zip(self.input_mean[offset..].iter().zip(&self.input_std[offset..]))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn target(&self, delta: &[f64]) -> Vec<f64> {
        delta.iter().zip(&self.output_scale).map(|(d, s)| d / s).collect()
    }
}

/// Header written in front of a basis artifact, recording how it was made.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub phi_draws: Vec<HiddenParams>,
    pub heldout_mse: f64,
    /// Constant prediction of the mean training delta.
    pub mean_predictor_mse: f64,
    /// Basis with the average training coefficients, no per-episode fit.
    #[serde(default)]
    pub context_free_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    nets: Vec<Mlp>,
    state_dim: usize,
    action_dim: usize,
    normalizer: Normalizer,
    /// Average training coefficients: the best single fixed combination,
    /// used as a context-free reference predictor.
    pub mean_coefficients: Vec<f64>,
    pub epochs: usize,
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BasisArtifact {
    format: String,
    version: u32,
    provenance: Option<Provenance>,
    basis: BasisSet,
}

impl BasisSet {
    pub fn new(nets: Vec<Mlp>, state_dim: usize, action_dim: usize) -> Result<Self> {
        Self::with_normalizer(
            nets,
            state_dim,
            action_dim,
            Normalizer::identity(state_dim + action_dim, state_dim),
        )
    }

    pub fn with_normalizer(
        nets: Vec<Mlp>,
        state_dim: usize,
        action_dim: usize,
        normalizer: Normalizer,
    ) -> Result<Self> {
        if nets.is_empty() {
            return Err(Error::InvalidArgument("a basis needs at least one function".into()));
        }
        for net in &nets {
            check_len("basis network input", state_dim + action_dim, net.input_dim())?;
            check_len("basis network output", state_dim, net.output_dim())?;
        }
        check_len("normalizer input", state_dim + action_dim, normalizer.input_mean.len())?;
        check_len("normalizer output", state_dim, normalizer.output_scale.len())?;
        let k = nets.len();
        Ok(Self {
            nets,
            state_dim,
            action_dim,
            normalizer,
            mean_coefficients: vec![0.0; k],
            epochs: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.nets.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub(crate) fn nets_mut(&mut self) -> &mut [Mlp] {
        &mut self.nets
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    /// Basis values at a raw `s ⧺ a` input: `k` vectors in the scaled space.
    pub fn evaluate_input(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_len("basis input", self.state_dim + self.action_dim, x.len())?;
        let z = self.normalizer.input(x);
        self.nets.iter().map(|n| n.forward(&z)).collect()
    }

    pub fn evaluate(&self, s: &[f64], a: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut x = Vec::with_capacity(s.len() + a.len());
        x.extend_from_slice(s);
        x.extend_from_slice(a);
        self.evaluate_input(&x)
    }

    pub fn compute_coefficients(&self, data: &TransitionDataset, ridge: f64) -> Result<Coefficients> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("coefficients need at least one sample".into()));
        }
        let mut g = Vec::with_capacity(data.len());
        let mut f = Vec::with_capacity(data.len());
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            check_len("dataset target", self.state_dim, y.len())?;
            g.push(self.evaluate_input(x)?);
            f.push(self.normalizer.target(y));
        }
        least_squares(&g, &f, ridge)
    }

    /// Predicted `s' - s` in raw state units.
    pub fn predict_delta(&self, b: &[f64], s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        check_len("coefficients", self.k(), b.len())?;
        check_len("state", self.state_dim, s.len())?;
        check_len("action", self.action_dim, a.len())?;
        let g = self.evaluate(s, a)?;
        Ok(combine(&g, b)
            .into_iter()
            .zip(&self.normalizer.output_scale)
            .map(|(d, sc)| d * sc)
            .collect())
    }

    /// Raw-unit delta from precomputed basis values (see [`Self::evaluate`]).
    pub fn delta_from_values(&self, g: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
        check_len("coefficients", self.k(), b.len())?;
        check_len("basis values", self.k(), g.len())?;
        Ok(combine(g, b)
            .into_iter()
            .zip(&self.normalizer.output_scale)
            .map(|(d, sc)| d * sc)
            .collect())
    }

    /// `ŝ' = s + Σ b_i g_i(s, a)`.
    pub fn predict_next_state(&self, b: &[f64], s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let delta = self.predict_delta(b, s, a)?;
        Ok(s.iter().zip(delta).map(|(x, d)| x + d).collect())
    }

    /// [`predict_next_state`](Self::predict_next_state) for many actions at one
    /// state, sharing the state's share of the first-layer work. Results are
    /// bit-identical to the one-at-a-time path.
    pub fn predict_next_states(&self, b: &[f64], s: &[f64], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_len("coefficients", self.k(), b.len())?;
        check_len("state", self.state_dim, s.len())?;
        let zs = self.normalizer.input_part(s, 0);
        let partials = self
            .nets
            .iter()
            .map(|n| n.first_layer_partial(&zs))
            .collect::<Result<Vec<_>>>()?;
        actions
            .iter()
            .map(|a| {
                check_len("action", self.action_dim, a.len())?;
                let za = self.normalizer.input_part(a, self.state_dim);
                let g = self
                    .nets
                    .iter()
                    .zip(&partials)
                    .map(|(n, p)| n.forward_from_partial(p, &za))
                    .collect::<Result<Vec<_>>>()?;
                Ok(combine(&g, b)
                    .into_iter()
                    .zip(&self.normalizer.output_scale)
                    .zip(s)
                    .map(|((d, sc), x)| x + d * sc)
                    .collect())
            })
            .collect()
    }

    /// Mean squared next-state error in raw units over `data`.
    pub fn prediction_mse(&self, b: &[f64], data: &TransitionDataset) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            let (s, a) = x.split_at(self.state_dim);
            let d = self.predict_delta(b, s, a)?;
            total += d.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
        }
        Ok(total / data.len() as f64)
    }

    pub fn to_json(&self, provenance: Option<&Provenance>) -> Result<String> {
        let artifact = BasisArtifact {
            format: BASIS_FORMAT.into(),
            version: BASIS_VERSION,
            provenance: provenance.cloned(),
            basis: self.clone(),
        };
        Ok(serde_json::to_string(&artifact)?)
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<Provenance>)> {
        let artifact: BasisArtifact = serde_json::from_str(text)?;
        if artifact.format != BASIS_FORMAT || artifact.version != BASIS_VERSION {
            return Err(Error::Version(format!("{} v{}", artifact.format, artifact.version)));
        }
        let b = artifact.basis;
        let checked = Self::with_normalizer(b.nets.clone(), b.state_dim, b.action_dim, b.normalizer.clone())?;
        check_len("mean coefficients", checked.k(), b.mean_coefficients.len())?;
        Ok((b, artifact.provenance))
    }

    pub fn save(&self, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        std::fs::write(path, self.to_json(provenance)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Provenance>)> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn combine(g: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g[0].len()];
    for (gi, bi) in g.iter().zip(b) {
        out.iter_mut().zip(gi).for_each(|(o, v)| *o += bi * v);
    }
    out
}

/// Gram matrix `G_ij = ⟨g_i, g_j⟩` from per-sample basis values (`N × k × d`).
pub fn gram_matrix(g: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let k = g.first().map_or(0, |s| s.len());
    let n = g.len().max(1) as f64;
    let mut gram = vec![vec![0.0; k]; k];
    for sample in g {
        for i in 0..k {
            for j in i..k {
                gram[i][j] += crate::numerics::dot(&sample[i], &sample[j]);
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            gram[i][j] /= n;
            gram[j][i] = gram[i][j];
        }
    }
    gram
}

/// Solves `(G + ridge·I) b = y` with `y_i = ⟨f, g_i⟩` and reports the mean
/// squared reconstruction residual.
pub fn least_squares(g: &[Vec<Vec<f64>>], f: &[Vec<f64>], ridge: f64) -> Result<Coefficients> {
    check_len("least-squares targets", g.len(), f.len())?;
    if g.is_empty() {
        return Err(Error::InvalidArgument("coefficients need at least one sample".into()));
    }
    let k = g[0].len();
    let n = g.len() as f64;
    let gram = gram_matrix(g);
    let mut y = vec![0.0; k];
    for (sample, target) in g.iter().zip(f) {
        for i in 0..k {
            y[i] += crate::numerics::dot(&sample[i], target);
        }
    }
    y.iter_mut().for_each(|v| *v /= n);
    let b = solve_ridge(&gram, &y, ridge)?;
    let residual = g
        .iter()
        .zip(f)
        .map(|(sample, target)| {
            combine(sample, &b)
                .iter()
                .zip(target)
                .map(|(p, t)| (p - t).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coefficients"));
    }
    Ok(Coefficients {
        b,
        sample_count: g.len(),
        residual,
    })
}

#[cfg(test)]
mod tests;
