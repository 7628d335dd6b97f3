use super::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Compare the tape gradient of a scalar function against central
/// differences.
///
/// Returns `max_i |analytic_i - fd_i| / max(1, |fd_i|)`. Functions with a
/// raw step (no surrogate) will report a large error at the step; that is
/// the expected outcome, not a bug in the checker.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return invalid(format!("eps must lie in [1e-4, 1e-2], got {eps}"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Autodiff("grad_check needs a scalar function".into()));
    }
    tape.value(y).check_finite()?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = t.leaf(probe);
        let out = f(&mut t, v)?;
        let val = t.value(out).data()[0];
        if !val.is_finite() {
            return Err(Error::NonFinite { index: 0, value: val });
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap();
        let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-3).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(grad_check(|t, v| Ok(t.sum_all(v)), &x, 1e-1).is_err());
        assert!(grad_check(|t, v| Ok(t.sum_all(v)), &x, 1e-6).is_err());
    }
}
