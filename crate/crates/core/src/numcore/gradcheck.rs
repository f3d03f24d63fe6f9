use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at `point`.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &Tensor) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point))
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p)).collect();
        let out = f(&tape, &vars)?;
        let v = tape.item(out);
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check function value is non-finite".into()));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p)).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| tape.grad(*v).expect("params track gradients"))
        .collect();

    let mut worst: f64 = 0.0;
    let mut pts = points.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        if !grad.is_finite() {
            return Err(Error::Numeric("analytic gradient is non-finite".into()));
        }
        for k in 0..pts[pi].numel() {
            let orig = pts[pi].data()[k];
            pts[pi].data_mut()[k] = orig + FD_STEP;
            let up = eval(&pts)?;
            pts[pi].data_mut()[k] = orig - FD_STEP;
            let down = eval(&pts)?;
            pts[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
