//! Reconstruction and variational losses.
//!
//! The VAE objective is `‖x − x̃‖² + β·KL(N(f, diag g) ‖ N(0, I))` with the
//! closed form `KL = ½ Σ (gᵢ + fᵢ² − 1 − ln gᵢ)`.

use crate::error::{NnError, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Inputs of the VAE objective: sample, reconstruction, posterior mean and
/// variance vectors, and the weight on the divergence term.
#[derive(Clone, Debug)]
pub struct VaeLossInputs<'a, T> {
    pub x: &'a [T],
    pub x_tilde: &'a [T],
    pub mean: &'a [T],
    pub variance: &'a [T],
    pub beta: T,
}

fn check_variance<T: Float>(variance: &[T]) -> Result<()> {
    match variance.iter().position(|&v| !(v > T::zero())) {
        Some(index) => Err(NnError::NonPositiveVariance {
            index,
            value: variance[index].as_f64(),
        }),
        None => Ok(()),
    }
}

/// Divergence of `N(mean, diag(variance))` from the standard normal.
pub fn kl_diag_gaussian<T: Float>(mean: &[T], variance: &[T]) -> Result<T> {
    if mean.len() != variance.len() {
        return Err(NnError::Shape(format!(
            "mean has {} entries, variance {}",
            mean.len(),
            variance.len()
        )));
    }
    check_variance(variance)?;
    let half = T::from_f64(0.5);
    Ok(mean
        .iter()
        .zip(variance)
        .map(|(&f, &g)| half * (g + f * f - T::one() - g.ln()))
        .sum())
}

pub fn squared_l2<T: Float>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(NnError::Shape(format!("{} vs {} values", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum())
}

pub fn vae_total_loss<T: Float>(inputs: &VaeLossInputs<'_, T>) -> Result<T> {
    let fidelity = squared_l2(inputs.x, inputs.x_tilde)?;
    Ok(fidelity + inputs.beta * kl_diag_gaussian(inputs.mean, inputs.variance)?)
}

/// Mean squared error of two equal-length slices.
pub fn mse<T: Float>(x: &[T], y: &[T]) -> Result<T> {
    Ok(squared_l2(x, y)? / T::from_f64(x.len().max(1) as f64))
}

/// Differentiable KL term on the tape.
pub fn kl_diag_gaussian_var<T: Float>(g: &mut Graph<T>, mean: Var, variance: Var) -> Result<Var> {
    check_variance(g.value(variance).data())?;
    let f2 = g.square(mean);
    let ln_g = g.log(variance);
    let a = g.add(variance, f2)?;
    let b = g.sub(a, ln_g)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    Ok(g.scale(s, 0.5))
}

/// Differentiable VAE objective on the tape.
pub fn vae_total_loss_var<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    x_tilde: Var,
    mean: Var,
    variance: Var,
    beta: f64,
) -> Result<Var> {
    let diff = g.sub(x, x_tilde)?;
    let sq = g.square(diff);
    let fidelity = g.sum(sq);
    let kl = kl_diag_gaussian_var(g, mean, variance)?;
    let weighted = g.scale(kl, beta);
    g.add(fidelity, weighted)
}

/// Per-sample mean squared error of two `[N, ...]` tensors.
pub fn per_sample_mse<T: Float>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Vec<T>> {
    x.check_same_shape(y)?;
    let n = x.shape()[0];
    let per = x.numel() / n.max(1);
    Ok(x.data()
        .chunks(per)
        .zip(y.data().chunks(per))
        .map(|(a, b)| mse(a, b).expect("equal chunks"))
        .collect())
}
