use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
///
/// `f` is evaluated twice at `x` first; differing results mean the function
/// is not deterministic and the oracle refuses to answer.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let a = f(x)?;
    let b = f(x)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {a} then {b} at the same point"
        )));
    }
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x.data()[i];
        let plus = f(&x.with_value(i, v + step)?)?;
        let minus = f(&x.with_value(i, v - step)?)?;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true derivative is ~0 from turning
/// round-off into huge relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn abs_away_from_kink() {
        let x = Tensor::vector(vec![2.0, -2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v.abs()).sum()), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
        assert!((g.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn nondeterminism_detected() {
        let calls = Cell::new(0.0);
        let x = Tensor::vector(vec![1.0]).unwrap();
        let r = finite_diff_grad(
            |t| {
                calls.set(calls.get() + 1.0);
                Ok(t.data()[0] + calls.get())
            },
            &x,
            1e-4,
        );
        assert!(matches!(r, Err(Error::Oracle(_))));
    }

    #[test]
    fn bad_step_rejected() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
