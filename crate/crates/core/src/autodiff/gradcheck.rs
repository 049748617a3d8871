use alloc::vec::Vec;

use super::{NodeId, Tape, Tensor};
use crate::{Error, Result};

fn evaluate<F>(f: &F, x: &[f64], coordinate: usize) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::unchecked();
    let leaf = tape.leaf(Tensor::row(x.to_vec()));
    let out = f(&mut tape, leaf).map_err(|_| Error::Evaluation { coordinate })?;
    match tape.value(out).item() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Evaluation { coordinate }),
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
///
/// `f` receives the tape and a `[1, n]` leaf holding the parameter vector.
pub fn central_difference<F>(f: &F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = evaluate(f, &probe, i)?;
            probe[i] = x[i] - step;
            let minus = evaluate(f, &probe, i)?;
            probe[i] = x[i];
            Ok((plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Rounding error of one loss evaluation, in units of `f64::EPSILON * max(|f|, 1)`.
pub const NOISE_ULPS: f64 = 64.0;

/// Largest `|autodiff - central| / |central|` over the coordinates of `x`.
///
/// Coordinates where both gradients lie below the rounding noise of the
/// central difference, `NOISE_ULPS * eps * max(|f(x)|, 1) / step`, count as
/// exact; the denominator is never smaller than that noise.
pub fn finite_diff_check<F>(f: F, x: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::row(x.to_vec()));
    let out = f(&mut tape, leaf).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Evaluation { coordinate: 0 },
        other => other,
    })?;
    let value = tape.value(out).item()?;
    let noise = NOISE_ULPS * f64::EPSILON * value.abs().max(1.0) / step;
    let analytic = tape.backward(out)?.get(leaf);
    let numeric = central_difference(&f, x, step)?;
    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            if a.abs().max(n.abs()) <= noise {
                0.0
            } else {
                (a - n).abs() / n.abs().max(noise)
            }
        })
        .fold(0.0, f64::max))
}
