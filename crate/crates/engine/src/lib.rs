//! Minimal CPU tensor engine: eager ops recorded on a tape, reverse-mode
//! autodiff, and an Adam optimizer. Generic over `f32` (default pipeline
//! precision) and `f64` (high-precision verification).

pub mod adam;
pub mod conv;
pub mod graph;
pub mod real;

pub use adam::Adam;
pub use graph::{Grads, Graph, Var};
pub use real::Real;

use ndarray::ArrayD;
use rand::Rng;

/// Array of i.i.d. N(0, 1) draws in row-major order.
pub fn randn<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::standard_normal(rng)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}
