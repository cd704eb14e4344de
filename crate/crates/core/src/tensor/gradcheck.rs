use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat coordinate where the worst error occurred.
    pub worst_index: usize,
}

/// Compares tape gradients of a scalar-valued `f` against central differences.
///
/// The error per coordinate is `|g_tape − g_fd| / max(|g_tape|, |g_fd|, 1e−8)`;
/// the maximum over all coordinates is returned.
pub fn finite_diff_check<F>(f: F, input: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..input.numel()).collect();
    finite_diff_check_at(f, input, h, &coords)
}

/// Like [`finite_diff_check`] but only probes the listed flat coordinates.
pub fn finite_diff_check_at<F>(f: F, input: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Contract("finite_diff_check needs a scalar-valued function".into()));
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };

    let mut worst = GradCheck { max_rel_error: 0.0, worst_index: 0 };
    for &i in coords {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let g = analytic.data()[i];
        let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        if err > worst.max_rel_error || err.is_nan() {
            worst = GradCheck { max_rel_error: if err.is_nan() { f64::INFINITY } else { err }, worst_index: i };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let r = finite_diff_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at a kink is the classic disagreement; probe exactly at 0.
        let x = Tensor::vector(vec![0.0]);
        let r = finite_diff_check(
            |t, x| {
                let y = t.relu(x);
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
