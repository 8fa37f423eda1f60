//! Central finite-difference comparison against autodiff gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Result of comparing analytic and numeric gradients for every input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input.
    pub relative_errors: Vec<f64>,
    pub analytic_norms: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Differentiates the scalar `f(inputs)` with respect to every input, both through
/// backprop and by perturbing one element at a time by `±step`. Inputs must be f64.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if inputs.iter().any(|t| t.dtype() != DType::F64) {
        return Err(Error::invalid("gradient checks run in f64"));
    }
    let vars = inputs
        .iter()
        .map(Var::from_tensor)
        .collect::<candle_core::Result<Vec<_>>>()?;
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let loss = f(&tensors)?;
    if loss.elem_count() != 1 {
        return Err(Error::invalid("gradient check needs a scalar objective"));
    }
    let grads = loss.backward()?;

    let eval = |replaced: usize, values: Vec<f64>| -> Result<f64> {
        let mut args: Vec<Tensor> = inputs.to_vec();
        args[replaced] = Tensor::from_vec(values, inputs[replaced].shape(), inputs[replaced].device())?;
        Ok(f(&args)?.flatten_all()?.to_vec1::<f64>()?[0])
    };

    let mut relative_errors = Vec::new();
    let mut analytic_norms = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[k].as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; input.elem_count()],
        };
        let base: Vec<f64> = input.flatten_all()?.to_vec1()?;
        let mut numeric = Vec::with_capacity(base.len());
        for e in 0..base.len() {
            let mut plus = base.clone();
            plus[e] += step;
            let mut minus = base.clone();
            minus[e] -= step;
            numeric.push((eval(k, plus)? - eval(k, minus)?) / (2.0 * step));
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        relative_errors.push(if scale == 0.0 { 0.0 } else { diff / scale });
        analytic_norms.push(na);
    }
    Ok(GradCheck {
        relative_errors,
        analytic_norms,
    })
}
