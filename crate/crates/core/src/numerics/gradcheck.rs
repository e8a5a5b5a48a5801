//! Finite-difference gradient checking in 64-bit mode.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Builds a scalar on the given tape from the supplied input variable.
pub trait ScalarFn: Fn(&mut Tape<f64>, Var) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, Var) -> Result<Var>> ScalarFn for F {}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F: ScalarFn>(f: &F, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = f(&mut tape, v)?;
    let val = tape.value(out);
    if val.len() != 1 {
        return Err(Error::NotScalar(val.shape().to_vec()));
    }
    let y = val.item();
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok(y)
}

/// Analytic gradient of `f` at `x`.
pub fn analytic_gradient<F: ScalarFn>(f: &F, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    let mut grads = tape.backward(out)?;
    Ok(grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Maximum relative error between the analytic gradient and central differences
/// with step `h`, over every component of `x`.
pub fn gradcheck<F: ScalarFn>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    gradcheck_components(f, x, h, &all)
}

/// As [`gradcheck`], restricted to the listed flat component indices.
pub fn gradcheck_components<F: ScalarFn>(f: F, x: &Tensor<f64>, h: f64, components: &[usize]) -> Result<f64> {
    eval(&f, x)?;
    let grad = analytic_gradient(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &c in components {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + h;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[c] = orig - h;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[c] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(grad.data()[c], numeric));
    }
    Ok(worst)
}
