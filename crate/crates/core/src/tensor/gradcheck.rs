//! Central finite-difference gradient checker.
//!
//! Used by the test suites and by the `selfcheck` command. It only relies on
//! forward evaluation, so it is independent of every backward closure it
//! validates.

use super::Tensor;
use crate::error::{bail, Result};

/// Relative error of the analytic gradient for each input tensor:
/// `||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, 1e-6)`.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares `backward` against central differences with step `h` for every
/// element of every input. `f` must map its inputs to a single-element
/// tensor and be deterministic.
pub fn check_gradients<F>(inputs: &[(Vec<usize>, Vec<f64>)], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&leaves)?;
    if out.numel() != 1 {
        bail!(Argument, "gradient check needs a scalar function");
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |which: usize, elem: usize, delta: f64| -> Result<f64> {
        let consts = inputs
            .iter()
            .enumerate()
            .map(|(k, (s, d))| {
                let mut d = d.clone();
                if k == which {
                    d[elem] += delta;
                }
                Tensor::new(s, d)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&consts)?.item())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (k, (_, d)) in inputs.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for e in 0..d.len() {
            let numeric = (eval(k, e, h)? - eval(k, e, -h)?) / (2.0 * h);
            let a = analytic[k][e];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-6);
        rel_errors.push(diff2.sqrt() / denom);
    }
    Ok(GradReport { rel_errors })
}
