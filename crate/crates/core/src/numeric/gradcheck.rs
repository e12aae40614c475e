use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences.
///
/// `loss_fn` returns `(loss, gradient)` at the given parameters. The result is
/// `max_i |analytic_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<F>(loss_fn: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (first, analytic) = loss_fn(params);
    let (second, _) = loss_fn(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    if analytic.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient entries", params.len()),
            actual: analytic.len().to_string(),
        });
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (up, _) = loss_fn(&x);
        x[i] = orig - epsilon;
        let (down, _) = loss_fn(&x);
        x[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn quadratic() {
        let f = |x: &[f64]| (0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec());
        let err = grad_check(f, &[1.0, 2.0], 1e-5).unwrap();
        assert!(err <= 1e-8);
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| (x[0] * x[0], vec![x[0]]);
        assert!(grad_check(f, &[3.0], 1e-5).unwrap() > 0.4);
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0.0);
        let f = |x: &[f64]| {
            calls.set(calls.get() + 1.0);
            (x[0] + calls.get(), vec![1.0])
        };
        assert!(matches!(grad_check(f, &[0.0], 1e-5), Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_bad_epsilon() {
        let f = |x: &[f64]| (x[0], vec![1.0]);
        assert!(grad_check(f, &[0.0], 1e-2).is_err());
    }
}
