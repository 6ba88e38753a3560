//! Central-difference gradient verification.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `max |a − n| / max(1, |n|)` over all coordinates.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn eval_value<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Analytic gradients of `f` at `inputs`.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("objective evaluated to {v}")));
    }
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Central-difference gradients of `f` at `inputs` with step `h`.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval_value(f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval_value(f, &work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Maximum relative error between the tape gradient of the scalar function
/// `f` and its central-difference estimate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, h)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum_all(sq)
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn nan_objective_is_an_error() {
        let x = Tensor::from_vec(vec![1.0]);
        let r = grad_check(
            |t, v| {
                let nan = t.constant(Tensor::scalar(f64::NAN));
                let s = t.mul(v[0], nan)?;
                t.sum_all(s)
            },
            &[x],
            DEFAULT_STEP,
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
