//! Central finite-difference verification of the analytic gradients.
//!
//! Runs entirely in `f64`: callers build their check functions over
//! `Tensor<f64>` so both the forward evaluations and the difference quotients
//! carry 64-bit accumulation.

use super::{Elem, Tensor};

/// Per-element comparison summary between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

/// Relative error with a floor on the denominator so that difference-quotient
/// noise on near-zero gradients does not dominate the report.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Element-by-element comparison of analytic against numeric gradients.
pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for (a_buf, n_buf) in analytic.iter().zip(numeric) {
        assert_eq!(a_buf.len(), n_buf.len(), "compare_gradients: buffer length mismatch");
        for (&a, &n) in a_buf.iter().zip(n_buf) {
            report.max_abs_err = report.max_abs_err.max((a - n).abs());
            report.max_rel_err = report.max_rel_err.max(rel_err(a, n));
            report.checked += 1;
        }
    }
    report
}

/// Compares the gradients that `loss.backward()` assigns to `inputs` against
/// central differences `(f(x+eps) - f(x-eps)) / 2eps`, element by element.
///
/// Every tensor in `inputs` must be a `requires_grad` leaf; `f` must rebuild
/// its graph from those leaves on every call.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    for t in inputs {
        assert!(t.requires_grad(), "grad_check: inputs must require gradients");
        t.zero_grad();
    }
    let loss = f(inputs);
    loss.backward();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut numeric: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    for t in inputs {
        let mut buf = Vec::with_capacity(t.numel());
        for idx in 0..t.numel() {
            let orig = t.data()[idx];
            t.data_mut()[idx] = orig + eps;
            let up = f(inputs).item();
            t.data_mut()[idx] = orig - eps;
            let down = f(inputs).item();
            t.data_mut()[idx] = orig;
            buf.push((up - down) / (2.0 * eps));
        }
        numeric.push(buf);
    }
    compare_gradients(&analytic, &numeric)
}

/// Inner product of two same-length buffers, used by the adjointness checks.
pub fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
