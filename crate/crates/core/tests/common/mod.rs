//! Shared test oracles: central finite differences and small helpers.
//!
//! Everything here evaluates models and graphs through their forward pass
//! only, independent of the reverse-mode implementation it is used to check.

use regionlab::model::{ModelConfig, ParameterStore};
use regionlab::tensor::{Tape, TensorId};

/// Central-difference gradient of `eval` at `theta`, with the step
/// `1e-4 * max(1, |theta_j|)` per coordinate.
pub fn central_diff_grad<G>(eval: G, theta: &[f64]) -> Vec<f64>
where
    G: Fn(&[f64]) -> f64,
{
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let h = 1e-4 * theta[j].abs().max(1.0);
        let orig = work[j];
        work[j] = orig + h;
        let up = eval(&work);
        work[j] = orig - h;
        let down = eval(&work);
        work[j] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Relative error with a small absolute floor so that near-zero gradients
/// are compared at finite-difference noise level instead of dividing by 0.
pub fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / fd.abs().max(ad.abs()).max(1e-3)
}

/// Collapses any tensor to a scalar through reshape + mean-cross-entropy,
/// giving every input coordinate a smooth influence on the result.
pub fn scalarize(tape: &mut Tape<f64>, x: TensorId, target: usize) -> TensorId {
    let n: usize = tape.shape(x).iter().product();
    let flat = tape.reshape(x, &[1, n]).unwrap();
    tape.mean_cross_entropy(flat, &[target % n]).unwrap()
}

/// Flattens all matrices of a store into one coordinate vector.
pub fn flatten_store(store: &ParameterStore<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(store.total_params());
    for i in 0..store.layout().entries().len() {
        out.extend_from_slice(store.matrix(i));
    }
    out
}

/// Rebuilds a store from a flat coordinate vector (inverse of
/// [`flatten_store`]).
pub fn unflatten_store(config: &ModelConfig, flat: &[f64]) -> ParameterStore<f64> {
    let layout = regionlab::model::Layout::of(config);
    let mut data = Vec::with_capacity(layout.entries().len());
    for desc in layout.entries() {
        data.push(flat[desc.offset..desc.offset + desc.len()].to_vec());
    }
    ParameterStore::from_matrices(config, data).unwrap()
}
