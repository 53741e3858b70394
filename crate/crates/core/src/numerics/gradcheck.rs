use super::{NumericsError, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of |a - n| / max(1e-8, |a| + |n|)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// `(parameter, coordinate, analytic, numeric)` at the largest relative error
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Central-difference check of every coordinate of `params`.
///
/// `f` must build a scalar on the tape it is given, reading each parameter
/// through the matching leaf in its second argument. Each parameter is
/// treated as trainable regardless of its own flag.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheck, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|p| tape.leaf(&p.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let y = tape.value(out).item()?;
        if !y.is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" });
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(&p.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("parameter leaves require grad").to_vec();
        for (ci, a) in analytic.into_iter().enumerate() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let n = (up - down) / (2.0 * step);
            let abs = (a - n).abs();
            let rel = abs / (a.abs() + n.abs()).max(1e-8);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci, a, n));
            }
            report.max_abs_error = report.max_abs_error.max(abs);
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = Tensor::scalar(3.0);
        let r = grad_check(|t, v| t.mul(v[0], v[0]), &[p], DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error <= 1e-7, "{r:?}");
        assert_eq!(r.coordinates, 1);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::vector(vec![1.0, -2.0]);
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &[p],
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let p = Tensor::scalar(700.0);
        let err = grad_check(
            |t, v| t.affine(v[0], 1e306, 0.0),
            &[p],
            DEFAULT_STEP,
        );
        assert!(matches!(err, Err(NumericsError::NonFinite { .. })));
    }
}
