use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so entries whose true gradient is
/// (near) zero are compared absolutely instead of amplifying roundoff.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` per input.
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::dim("grad_check", "function must return a scalar"));
    }
    Ok(g.scalar(out))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check: eps {eps} outside [1e-7, 1e-4]"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.scalar(out);
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check: function value".into(),
        });
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("input requires grad").to_vec())
        .collect();

    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("grad_check: analytic gradient of input {k}"),
            });
        }
        let mut worst: f64 = 0.0;
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let fp = evaluate(&f, &work)?;
            work[k].data_mut()[i] = orig - eps;
            let fm = evaluate(&f, &work)?;
            work[k].data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check: perturbed value at input {k}[{i}]"),
                });
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grads[i];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e < tol);
    Ok(GradCheckReport {
        max_rel_error,
        tol,
        passed,
    })
}
