//! Small dense kernels: an MLP with manual backprop, Adam, and a ridge solver.

mod adam;
mod linalg;
mod mlp;

pub use adam::{clip_grad_norm, Adam};
pub use linalg::solve_ridge;
pub use mlp::{dot, Gradients, Mlp, Trace};
