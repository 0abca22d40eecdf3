//! Dense linear algebra, seeded randomness, AdamW and finite-difference
//! gradient checking.
//!
//! Every routine here is deterministic: reductions run in a fixed
//! left-to-right order so identical inputs give bit-identical outputs.

mod adamw;
mod fd;
mod matrix;
mod ops;
mod rng;

pub use adamw::{adamw_step, AdamW, OptimizerState, Param};
pub use fd::{finite_diff_grad, relative_error};
pub use matrix::{dot, norm, Matrix};
pub use ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, layer_norm_cached, softmax};
pub use rng::Rng;

/// `rows × cols` matrix with entries drawn from `N(0, std²)`.
pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
}
