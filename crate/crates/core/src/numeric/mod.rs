//! Dense tensors, a recorded computation graph with reverse-mode
//! differentiation, the Adam optimizer and the counter-based RNG.

mod adam;
mod graph;
pub mod kernels;
mod params;
mod rng;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{sigmoid, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::{numel, Tensor};

/// Central finite-difference gradient of `f` at `x`, entry by entry.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max over entries of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
