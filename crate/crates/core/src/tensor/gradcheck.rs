use super::{Result, Tape, Tensor, TensorError, Var};

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v)?;
    if tape.shape(out).iter().product::<usize>() != 1 {
        return Err(TensorError::NonScalarRoot(tape.shape(out).to_vec()));
    }
    Ok(tape.scalar_value(out))
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences. Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with(f, x, eps, |_| {})
}

/// As [`grad_check`], with a hook to configure the analytic tape first.
pub fn grad_check_with<F, S>(f: F, x: &Tensor, eps: f64, setup: S) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    S: Fn(&mut Tape),
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            reason: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }
    let a = eval(&f, x)?;
    let b = eval(&f, x)?;
    if a.to_bits() != b.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    let mut tape = Tape::new();
    setup(&mut tape);
    let v = tape.param(x);
    let root = f(&mut tape, v)?;
    tape.backward(root)?;
    let analytic = tape
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| t.sum(v), &x, 1e-2).is_err());
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let x = Tensor::scalar(1.0);
        let res = grad_check(
            |t, v| {
                counter.set(counter.get() + 1.0);
                t.mul_scalar(v, counter.get())
            },
            &x,
            1e-5,
        );
        assert_eq!(res.unwrap_err(), TensorError::NonDeterministic);
    }
}
