use super::{DType, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences, coordinate by coordinate.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-6)`. The floor keeps
/// coordinates whose true gradient is zero from reporting pure round-off.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x.dtype() != DType::F64 {
        return Err(Error::Precision("grad_check needs an f64 input".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Param(format!("eps must be positive, got {eps}")));
    }
    if !x.all_finite() {
        return Err(Error::Eval("input has non-finite values".into()));
    }
    let leaf = x.requires_grad();
    let y = f(&leaf)?;
    let y0 = y.item()?;
    if !y0.is_finite() {
        return Err(Error::Eval(format!("f(x) = {y0}")));
    }
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let probe = Tensor::new(data, x.shape(), DType::F64)?;
        let v = f(&probe)?.item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Eval(format!("f evaluated to {v} during differencing")))
        }
    };

    let mut report = GradReport { max_relative_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    let base = x.to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if i == 0 || rel > report.max_relative_error {
            report = GradReport { max_relative_error: rel, worst_index: i, analytic: a, numeric };
        }
    }
    Ok(report)
}
