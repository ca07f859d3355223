use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` for every element.
pub fn central_difference<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at element {i}")));
        }
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Compares the analytic gradient returned by `f` at `x` against central
/// differences. Returns the max relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    let (value, analytic) = f(x);
    if !value.is_finite() {
        return Err(Error::NonFinite("objective at the evaluation point".into()));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::shape(
            "grad_check",
            format!("{:?}", x.shape()),
            format!("{:?}", analytic.shape()),
        ));
    }
    let numeric = central_difference(|p| f(p).0, x, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}
