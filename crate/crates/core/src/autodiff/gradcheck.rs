//! Central-difference gradient verification.

use super::{ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    /// Index of the coordinate with the largest relative error.
    pub fn worst(&self) -> Option<usize> {
        (0..self.analytic.len())
            .max_by(|&a, &b| relative_error(self.analytic[a], self.numeric[a]).total_cmp(&relative_error(self.analytic[b], self.numeric[b])))
    }
}

/// Compares the tape gradient of a scalar function against
/// `(f(x+h) − f(x−h)) / 2h` at every coordinate of `point`.
///
/// `f` records its computation on the given tape starting from the input
/// variable and returns the scalar output.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Usage(format!("finite difference step must be positive, got {h}")));
    }
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.leaf(point, true);
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y, &mut store)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; point.numel()],
    };

    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p, false);
        let y = f(&mut tape, x)?;
        Ok(tape.item(y))
    };
    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let max_rel_error = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let point = Tensor::from_f64(vec![4], &[0.3, -1.2, 2.5, 7.0]).unwrap();
        let report = finite_diff_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let point = Tensor::from_f64(vec![3], &[0.5, -0.25, 1.5]).unwrap();
        let report = finite_diff_check(
            |tape, x| {
                tape.inject_fault(true);
                let s = tape.silu(x);
                Ok(tape.sum(s))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{}", report.max_rel_error);
    }

    #[test]
    fn silu_derivative_at_one() {
        let point = Tensor::from_f64(vec![1], &[1.0]).unwrap();
        let report = finite_diff_check(
            |tape, x| {
                let s = tape.silu(x);
                Ok(tape.sum(s))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!((report.numeric[0] - 0.9277).abs() < 1e-3);
        assert!((report.analytic[0] - 0.9277).abs() < 1e-3);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let point = Tensor::from_f64(vec![1], &[1.0]).unwrap();
        assert!(finite_diff_check(|tape, x| Ok(tape.sum(x)), &point, 0.0).is_err());
    }
}
