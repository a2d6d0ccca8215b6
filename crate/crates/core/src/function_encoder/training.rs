use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{least_squares, BasisSet, Normalizer, TransitionDataset};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Mlp, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisTrainConfig {
    pub k: usize,
    pub hidden: Vec<usize>,
    /// One epoch is one gradient step over a minibatch of tasks.
    pub epochs: usize,
    pub lr: f64,
    pub tasks_per_batch: usize,
    pub samples_per_task: usize,
    pub ridge: f64,
}

impl Default for BasisTrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            hidden: vec![32],
            epochs: 1500,
            lr: 2e-3,
            tasks_per_batch: 10,
            samples_per_task: 128,
            ridge: 1e-6,
        }
    }
}

/// Trains `k` basis networks on `L + L_reg`, where `L` is the mean squared
/// least-squares reconstruction error over tasks and
/// `L_reg = Σ_i (‖g_i‖² - 1)²` keeps every basis function near unit norm.
///
/// The coefficients solve the ridge-regularized normal equations, so their
/// derivative drops out of the gradient of the ridge-regularized reconstruction
/// error; the basis gradient is taken with `b` held fixed.
pub fn train_basis<R: Rng + ?Sized>(
    datasets: &[TransitionDataset],
    cfg: &BasisTrainConfig,
    state_dim: usize,
    rng: &mut R,
) -> Result<BasisSet> {
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if datasets.len() < 2 {
        return Err(Error::InvalidArgument(
            "basis training needs at least two datasets".into(),
        ));
    }
    let min_samples = cfg.k * 10;
    if let Some(d) = datasets.iter().find(|d| d.len() < min_samples) {
        return Err(Error::InvalidArgument(format!(
            "every dataset needs at least {min_samples} samples, found {}",
            d.len()
        )));
    }
    let normalizer = Normalizer::fit(datasets)?;
    let input_dim = datasets[0].inputs[0].len();
    if input_dim < state_dim {
        return Err(Error::InvalidArgument("input narrower than the state".into()));
    }
    let mut sizes = vec![input_dim];
    sizes.extend(&cfg.hidden);
    sizes.push(state_dim);
    let nets = (0..cfg.k).map(|_| Mlp::new(&sizes, rng)).collect::<Result<Vec<_>>>()?;
    let mut basis = BasisSet::with_normalizer(nets, state_dim, input_dim - state_dim, normalizer)?;
    let mut adams: Vec<Adam> = basis.nets().iter().map(|n| Adam::new(n.num_params(), cfg.lr)).collect();

    // standardized copies of every dataset
    let scaled: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = datasets
        .iter()
        .map(|d| {
            let x = d.inputs.iter().map(|x| basis.normalizer().input(x)).collect();
            let y = d.targets.iter().map(|y| basis.normalizer().target(y)).collect();
            (x, y)
        })
        .collect();

    let n_tasks = cfg.tasks_per_batch.clamp(1, datasets.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let tasks = sample(rng, datasets.len(), n_tasks).into_vec();
        let mut batch = Vec::with_capacity(tasks.len());
        for &task in &tasks {
            let (xs, ys) = &scaled[task];
            let idx: Vec<usize> = if xs.len() > cfg.samples_per_task {
                sample(rng, xs.len(), cfg.samples_per_task).into_vec()
            } else {
                (0..xs.len()).collect()
            };
            batch.push((
                idx.iter().map(|&i| xs[i].clone()).collect::<Vec<_>>(),
                idx.iter().map(|&i| ys[i].clone()).collect::<Vec<_>>(),
            ));
        }
        let (loss, grads) = basis_loss_and_grad(basis.nets(), &batch, cfg.ridge)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("basis training loss"));
        }
        history.push(loss);
        for ((net, adam), grad) in basis.nets_mut().iter_mut().zip(&mut adams).zip(&grads) {
            adam.step(net.params_mut(), grad)?;
        }
    }

    let mut mean = vec![0.0; cfg.k];
    for d in datasets {
        let c = basis.compute_coefficients(d, cfg.ridge)?;
        mean.iter_mut()
            .zip(&c.b)
            .for_each(|(m, b)| *m += b / datasets.len() as f64);
    }
    basis.mean_coefficients = mean;
    basis.epochs = cfg.epochs;
    basis.loss_history = history;
    Ok(basis)
}

/// Training loss on a batch of standardized tasks `(inputs, targets)` and its
/// gradient with respect to every basis network's parameters.
///
/// Per task the loss is `min_b [mean ‖f - Σ b_j g_j‖² + ridge ‖b‖²] +
/// Σ_j (‖g_j‖² - 1)²`, averaged over tasks. Because `b` is the exact
/// minimizer of the bracket, its dependence on the networks contributes
/// nothing to the gradient.
pub fn basis_loss_and_grad(
    nets: &[Mlp],
    tasks: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)],
    ridge: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = nets.len();
    let mut grads: Vec<Vec<f64>> = nets.iter().map(|n| vec![0.0; n.num_params()]).collect();
    let mut total = 0.0;
    let t = tasks.len().max(1) as f64;
    for (xs, ys) in tasks {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("empty task in basis batch".into()));
        }
        let n = xs.len() as f64;
        let traces: Vec<Vec<Trace>> = xs
            .iter()
            .map(|x| nets.iter().map(|net| net.forward_trace(x)).collect())
            .collect::<Result<_>>()?;
        let g: Vec<Vec<Vec<f64>>> = traces
            .iter()
            .map(|per| per.iter().map(|tr| tr.output().to_vec()).collect())
            .collect();
        let coeffs = least_squares(&g, ys, ridge)?;
        let norms: Vec<f64> = (0..k)
            .map(|j| g.iter().map(|s| s[j].iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n)
            .collect();
        let penalty = ridge * coeffs.b.iter().map(|b| b * b).sum::<f64>();
        total += (coeffs.residual + penalty + norms.iter().map(|q| (q - 1.0).powi(2)).sum::<f64>()) / t;

        for (s, (per, target)) in traces.iter().zip(g.iter().zip(ys)) {
            let mut recon = target.clone();
            for (j, gj) in per.iter().enumerate() {
                recon.iter_mut().zip(gj.iter()).for_each(|(r, v)| *r -= coeffs.b[j] * v);
            }
            for (j, net) in nets.iter().enumerate() {
                let upstream: Vec<f64> = recon
                    .iter()
                    .zip(&per[j])
                    .map(|(r, gv)| (-2.0 * coeffs.b[j] * r + 4.0 * (norms[j] - 1.0) * gv) / (n * t))
                    .collect();
                net.backward_trace(&s[j], &upstream, &mut grads[j])?;
            }
        }
    }
    Ok((total, grads))
}
