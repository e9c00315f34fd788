//! Central-difference gradient verification.

use super::{NoGradGuard, Result, Tensor, TensorError};

/// Compare the analytic gradient of `f` at `x` against central finite
/// differences with step `eps`.
///
/// Returns the max over entries of `|analytic - numeric| / max(1, |numeric|)`.
/// `x` must be a leaf; its values are perturbed in place between fresh
/// forward passes and restored afterwards. Any non-finite value fails the
/// check with an error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(x.is_leaf(), "grad_check differentiates a leaf tensor");
    let was_param = x.requires_grad_flag();
    if !was_param {
        let _ = x.clone().requires_grad(true);
    }
    let result = run(&f, x, eps);
    if !was_param {
        let _ = x.clone().requires_grad(false);
    }
    result
}

fn run<F>(f: &F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    // Analytic pass.
    x.zero_grad();
    let loss = f(x)?;
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar {
            op: "grad_check",
            shape: loss.shape(),
        });
    }
    loss.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    x.zero_grad();

    // Numeric pass, entry by entry.
    let n = x.numel();
    let mut max_rel = 0.0f64;
    let _guard = NoGradGuard::new();
    for i in 0..n {
        let orig = x.with_data_mut(|d| {
            let v = d[i];
            d[i] = v + eps;
            v
        });
        let plus = f(x)?.item();
        x.with_data_mut(|d| d[i] = orig - eps);
        let minus = f(x)?.item();
        x.with_data_mut(|d| d[i] = orig);

        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
