use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative discrepancy used by every gradient check in this crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of `f` at `x` with central differences of step
/// `h` and returns the largest per-coordinate relative error.
///
/// `f` records a scalar computation on the tape it is handed, starting from
/// the variable bound to `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(finite_diff_pairs(f, x, h)?
        .into_iter()
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// `(analytic, numeric)` derivative for every coordinate of `x`.
pub fn finite_diff_pairs<F>(f: F, x: &Tensor, h: f64) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let input = x.clone().with_grad();
    let xv = tape.leaf(&input);
    let loss = f(&mut tape, xv)?;
    ensure_finite(tape.scalar(loss)?)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .ok_or_else(|| Error::Contract("no gradient reached the checked input".into()))?
        .to_vec();

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let probe = Tensor::new(x.shape().to_vec(), values)?;
        let v = tape.leaf(&probe);
        let out = f(&mut tape, v)?;
        ensure_finite(tape.scalar(out)?)
    };

    let mut pairs = Vec::with_capacity(analytic.len());
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        pairs.push((a, (eval(plus)? - eval(minus)?) / (2.0 * h)));
    }
    Ok(pairs)
}

fn ensure_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("checked function returned non-finite value {v}")))
    }
}
