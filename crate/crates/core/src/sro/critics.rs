use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mlp;

/// Reward value, cost value and cost action-value networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticSet {
    pub v_r: Mlp,
    pub v_c: Mlp,
    /// Input: `obs ⧺ context ⧺ action`.
    pub q_c: Mlp,
}

fn scalar_net<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Mlp> {
    let mut sizes = vec![input_dim];
    sizes.extend(hidden);
    sizes.push(1);
    Mlp::new(&sizes, rng)
}

fn scalar(net: &Mlp, x: &[f64], what: &'static str) -> Result<f64> {
    let v = net.forward(x)?[0];
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

impl CriticSet {
    /// Each network draws from its own generator so that adding or dropping
    /// one does not shift the others' initialization.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rngs: [&mut R; 3],
    ) -> Result<Self> {
        let [r0, r1, r2] = rngs;
        Ok(Self {
            v_r: scalar_net(input_dim, hidden, r0)?,
            v_c: scalar_net(input_dim, hidden, r1)?,
            q_c: scalar_net(input_dim + action_dim, hidden, r2)?,
        })
    }

    pub fn value_r(&self, input: &[f64]) -> Result<f64> {
        scalar(&self.v_r, input, "reward value")
    }

    pub fn value_c(&self, input: &[f64]) -> Result<f64> {
        scalar(&self.v_c, input, "cost value")
    }

    pub fn q_cost(&self, input: &[f64], action: &[f64]) -> Result<f64> {
        let mut x = Vec::with_capacity(input.len() + action.len());
        x.extend_from_slice(input);
        x.extend_from_slice(action);
        scalar(&self.q_c, &x, "cost action-value")
    }
}
