//! Central finite-difference checks against tape gradients.
//!
//! The numeric side only ever calls [`Tape::replay`], i.e. forward
//! evaluation. It never touches the adjoint rules it is checking.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const STEP: f64 = 1e-6;

/// Denominator floor for relative errors. A central difference with
/// [`STEP`] on an O(1) function carries rounding noise near 1e-10, so
/// derivatives below this floor are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl CheckRow {
    pub fn new(name: impl Into<String>, analytic: f64, numeric: f64) -> Self {
        CheckRow {
            name: name.into(),
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.rel_err.is_finite() && self.rel_err < tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Loss value at the current leaf values.
fn loss_at(tape: &mut Tape, loss: Var, leaves: &[(Var, Tensor)]) -> Result<f64> {
    tape.replay(leaves)?;
    tape.value(loss).item()
}

/// Compares `∇f · v` against `(f(x + hv) - f(x - hv)) / 2h` for a random
/// direction `v` drawn uniformly from `[-1, 1]` per element.
///
/// Leaves are restored to their original values before returning.
pub fn directional<R: Rng + ?Sized>(
    tape: &mut Tape,
    loss: Var,
    leaves: &[Var],
    step: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let grads = tape.backward(loss)?;
    let originals: Vec<Tensor> = leaves.iter().map(|&v| tape.value(v).clone()).collect();
    let directions: Vec<Tensor> = originals
        .iter()
        .map(|t| Tensor::uniform(t.shape(), -1.0, 1.0, rng))
        .collect();

    let mut analytic = 0.0;
    for ((&leaf, x), d) in leaves.iter().zip(&originals).zip(&directions) {
        let (g, _) = grads.of_or_zeros(leaf, x.shape());
        analytic += g.dot(d)?;
    }

    let shifted = |sign: f64| -> Vec<(Var, Tensor)> {
        leaves
            .iter()
            .zip(&originals)
            .zip(&directions)
            .map(|((&leaf, x), d)| {
                (
                    leaf,
                    x.zip_map(d, |a, b| a + sign * step * b)
                        .expect("same shape"),
                )
            })
            .collect()
    };
    let plus = loss_at(tape, loss, &shifted(1.0))?;
    let minus = loss_at(tape, loss, &shifted(-1.0))?;
    let restore: Vec<(Var, Tensor)> = leaves.iter().copied().zip(originals).collect();
    tape.replay(&restore)?;
    Ok((analytic, (plus - minus) / (2.0 * step)))
}

/// Full central-difference gradient with respect to one leaf, one element
/// at a time.
pub fn numeric_gradient(tape: &mut Tape, loss: Var, leaf: Var, step: f64) -> Result<Tensor> {
    let x0 = tape.value(leaf).clone();
    let mut out = Tensor::zeros(x0.shape());
    for i in 0..x0.len() {
        let mut xp = x0.clone();
        xp.data_mut()[i] += step;
        let plus = loss_at(tape, loss, &[(leaf, xp)])?;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= step;
        let minus = loss_at(tape, loss, &[(leaf, xm)])?;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    tape.replay(&[(leaf, x0)])?;
    Ok(out)
}

/// Central-difference gradient of a plain function.
pub fn numeric_gradient_fn(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Largest elementwise relative error between two gradients, using a
/// common scale (the larger infinity norm) as the denominator.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(RELATIVE_FLOOR);
    Ok(analytic.max_abs_diff(numeric)? / scale)
}
