//! Central finite-difference gradient checking for scalar-valued functions.
//!
//! Intended for small double-precision inputs: every element is perturbed
//! individually, so cost is two forward passes per element.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub elements: usize,
    /// Largest analytic gradient magnitude; zero means the check was vacuous.
    pub max_grad: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    let t = t.to_dtype(DType::F64)?;
    let v = t.flatten_all()?.to_vec1::<f64>()?;
    if v.len() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar output, got {:?}",
            t.dims()
        )));
    }
    Ok(v[0])
}

fn compare(analytic: &[f64], numeric: &[f64]) -> GradReport {
    let max_grad = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // Elements whose gradient is negligible relative to the largest one are
    // judged against that scale instead of their own magnitude.
    let floor = 1e-6 * max_grad.max(1e-3);
    let mut max_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(rel);
    }
    GradReport {
        max_rel_err,
        max_abs_err,
        elements: analytic.len(),
        max_grad,
    }
}

/// Compare the autodiff gradient of `f` at `x` against central differences.
pub fn check_input_gradient<F>(f: F, x: &Tensor, step: f64) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = x.to_dtype(DType::F64)?;
    let var = Var::from_tensor(&x)?;
    let y = f(var.as_tensor())?;
    let grads = y.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x.elem_count()],
    };
    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = scalar(&f(&Tensor::from_vec(plus, x.shape(), x.device())?)?)?;
        let fm = scalar(&f(&Tensor::from_vec(minus, x.shape(), x.device())?)?)?;
        numeric.push((fp - fm) / (2.0 * step));
    }
    Ok(compare(&analytic, &numeric))
}

/// Same check for a model parameter: `loss` is re-evaluated after perturbing
/// `param` in place, and the parameter is restored afterwards.
pub fn check_param_gradient<F>(loss: F, param: &Var, step: f64) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor>,
{
    let original = param.as_tensor().copy()?;
    let y = loss()?;
    let grads = y.backward()?;
    let analytic = match grads.get(param.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; original.elem_count()],
    };
    let base = original.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut numeric = Vec::with_capacity(base.len());
    let eval_at = |values: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(values, original.shape(), original.device())?
            .to_dtype(original.dtype())?;
        param.set(&t)?;
        scalar(&loss()?)
    };
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = eval_at(plus)?;
        let fm = eval_at(minus)?;
        numeric.push((fp - fm) / (2.0 * step));
    }
    param.set(&original)?;
    Ok(compare(&analytic, &numeric))
}
