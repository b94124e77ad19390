//! Central finite-difference verification of tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

const STEP: f64 = 1e-6;

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, inputs: &[Matrix<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.data().len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar output, got {:?}",
            v.shape()
        )));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::Numeric("non-finite function value in grad_check".into()));
    }
    Ok(y)
}

/// Central differences with step `1e-6 · max(1, |x|)` for every input entry.
pub fn finite_difference_gradient<F>(f: &F, inputs: &[Matrix<f64>]) -> Result<Vec<Matrix<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Matrix<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let (r, c) = inputs[k].shape();
        let mut g = Matrix::zeros(r, c);
        for idx in 0..r * c {
            let x = inputs[k].data()[idx];
            let h = STEP * x.abs().max(1.0);
            work[k].data_mut()[idx] = x + h;
            let plus = eval_scalar(f, &work)?;
            work[k].data_mut()[idx] = x - h;
            let minus = eval_scalar(f, &work)?;
            work[k].data_mut()[idx] = x;
            g.data_mut()[idx] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest component-wise relative error between tape gradients and central
/// finite differences of the scalar composite `f`.
pub fn grad_check<F>(f: F, inputs: &[Matrix<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).data().len() != 1 {
        return Err(Error::Shape("grad_check needs a scalar output".into()));
    }
    let grads = tape.backward(out);
    let fd = finite_difference_gradient(&f, inputs)?;
    let mut worst = 0.0f64;
    for (v, numeric) in vars.iter().zip(&fd) {
        let analytic = grads.get_or_zeros(*v, &tape);
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            if !a.is_finite() || !n.is_finite() {
                return Err(Error::Numeric("non-finite gradient in grad_check".into()));
            }
            worst = worst.max(relative_error(a, n));
        }
    }
    Ok(worst)
}
