//! Training losses.
//!
//! Each loss takes the network's output probabilities and returns the
//! scalar loss together with its gradient w.r.t. those outputs, which
//! seeds the stack's backward pass. Losses average over the batch, and
//! probabilities are clipped before the logarithm so saturated heads
//! yield finite losses and gradients.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Clip bound for probabilities entering a logarithm.
pub const PROB_CLIP: f64 = 1e-7;

fn clip<S: Scalar>(p: S) -> S {
    let lo = S::from_f64(PROB_CLIP);
    let hi = S::one() - lo;
    p.max(lo).min(hi)
}

/// Binary cross-entropy, mean over the batch.
///
/// `pred` is any tensor of probabilities with one entry per target.
/// Returns (loss, dloss/dpred).
pub fn bce<S: Scalar>(pred: &Tensor<S>, targets: &[bool]) -> Result<(S, Tensor<S>)> {
    if pred.len() != targets.len() {
        return Err(Error::shape(
            format!("{} predictions", targets.len()),
            format!("{}", pred.len()),
        ));
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput("bce on empty batch".into()));
    }
    let n = S::from_f64(targets.len() as f64);
    let mut loss = S::zero();
    let mut grad = pred.clone();
    for (g, (&p, &y)) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data().iter().zip(targets))
    {
        let p = clip(p);
        let (yv, one) = (if y { S::one() } else { S::zero() }, S::one());
        loss += -(yv * p.ln() + (one - yv) * (one - p).ln());
        *g = (p - yv) / (p * (one - p)) / n;
    }
    Ok((loss / n, grad))
}

/// Categorical cross-entropy over [batch, classes] probability rows
/// (softmax output), mean over the batch. Rows must already be
/// normalized; a row sum off by more than 1e-6 is a normalization error.
///
/// Returns (loss, dloss/dpred); the gradient is nonzero only at target
/// entries, the softmax layer's backward distributes it.
pub fn cce<S: Scalar>(pred: &Tensor<S>, targets: &[usize]) -> Result<(S, Tensor<S>)> {
    let (batch, m) = pred.dims2();
    if batch != targets.len() {
        return Err(Error::shape(
            format!("{} rows", targets.len()),
            format!("{batch}"),
        ));
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput("cce on empty batch".into()));
    }
    let tol = S::from_f64(1e-6);
    let n = S::from_f64(batch as f64);
    let mut loss = S::zero();
    let mut grad = Tensor::zeros(&[batch, m]);
    for (b, &t) in targets.iter().enumerate() {
        if t >= m {
            return Err(Error::Argument(format!("target class {t} out of {m}")));
        }
        let row = pred.row(b);
        let sum = row.iter().fold(S::zero(), |a, v| a + *v);
        if (sum - S::one()).abs() > tol {
            return Err(Error::Normalization(format!(
                "probability row {b} sums to {sum}, expected 1"
            )));
        }
        let p = clip(row[t]);
        loss += -p.ln();
        grad.data_mut()[b * m + t] = -S::one() / (p * n);
    }
    Ok((loss / n, grad))
}

/// Weighted sum of two task losses: `theta * l_a + alpha * l_b`.
///
/// Gradient flow to both heads is arranged by scaling each head's
/// gradient tensor by its weight before backward.
pub fn combined<S: Scalar>(l_a: S, l_b: S, theta: S, alpha: S) -> S {
    theta * l_a + alpha * l_b
}
