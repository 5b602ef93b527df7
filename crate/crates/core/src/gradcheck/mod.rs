//! Central finite-difference oracle for autodiff gradients.

pub mod suite;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Outcome of comparing autodiff to central differences on one input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarRoot(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Evaluate `f` once without recording gradients.
pub fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input("x", x.clone(), false);
    let y = f(&mut g, xv)?;
    scalar_of(&g, y)
}

/// Compare the autodiff gradient of scalar-valued `f` at `x` against central
/// differences with step `eps`; reports the worst elementwise relative error
/// using `max(|a|, |b|, 1e-8)` as denominator.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, eps, &all)
}

/// [`finite_diff_check`] restricted to the listed flat indices.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, indices: &[usize]) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::Config(format!("probe index {bad} out of range for {} entries", x.numel())));
    }
    let mut g = Graph::new();
    let xv = g.input("x", x.clone(), true);
    let y = f(&mut g, xv)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(xv).expect("input requires grad").clone();

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries: indices.len(),
    };
    let mut probe = x.clone();
    for (n, &i) in indices.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = rel_err(a, numeric);
        if n == 0 || err > report.max_rel_err {
            report = GradCheck {
                max_rel_err: err,
                worst_index: i,
                analytic: a,
                numeric,
                entries: indices.len(),
            };
        }
    }
    Ok(report)
}
