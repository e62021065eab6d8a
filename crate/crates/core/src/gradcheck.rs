//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Flat index of the element with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Elements where the two one-sided differences disagree, i.e. the
    /// function is not differentiable there (max-pool ties, activation kinks).
    pub excluded: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, x: &Tensor4<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(Error::Contract(format!(
            "finite-difference target returned dims {}",
            value.dims()
        )));
    }
    Ok(value.data()[0])
}

/// Compares the tape gradient of scalar-valued `f` at `x` against central
/// differences with the given `step`, element by element.
///
/// Elements whose forward and backward one-sided slopes differ by more than
/// `kink_tol` (absolute, after scaling by `max(1, |slope|)`) are counted as
/// non-differentiable points and left out of the error.
pub fn finite_difference_check<F>(
    f: F,
    x: &Tensor4<f64>,
    step: f64,
    kink_tol: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, &all, step, kink_tol)
}

/// Like [`finite_difference_check`], restricted to the flat `indices` of `x`.
pub fn finite_difference_check_at<F>(
    f: F,
    x: &Tensor4<f64>,
    indices: &[usize],
    step: f64,
    kink_tol: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if let Some(&i) = indices.iter().find(|&&i| i >= x.len()) {
        return Err(Error::Contract(format!(
            "probe index {i} outside a tensor of {} elements",
            x.len()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let base = tape.value(out).data()[0];
    let analytic = tape.backward(out)?.wrt(v);

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
    };
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;

        let fwd = (up - base) / step;
        let bwd = (base - down) / step;
        if (fwd - bwd).abs() > kink_tol * fwd.abs().max(bwd.abs()).max(1.0) {
            report.excluded += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic.data()[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn sum_is_exact() {
        let x = random([1, 2, 3, 3], 1);
        let r = finite_difference_check(|t, v| Ok(t.sum(v)), &x, 1e-3, 0.5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 18);
    }

    #[test]
    fn sigmoid_sum_within_tolerance() {
        let x = random([1, 3, 4, 4], 2);
        let r = finite_difference_check(
            |t, v| {
                let s = t.sigmoid(v);
                Ok(t.sum(s))
            },
            &x,
            1e-3,
            0.5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        assert_eq!(r.excluded, 0);
    }

    #[test]
    fn max_pool_tie_is_excluded() {
        let x = Tensor4::<f64>::from_vec([1, 1, 1, 3], vec![1.0, 1.0, -3.0]).unwrap();
        let r = finite_difference_check(
            |t, v| {
                let m = t.global_max_pool(v)?;
                Ok(t.sum(m))
            },
            &x,
            1e-3,
            0.5,
        )
        .unwrap();
        assert_eq!(r.excluded, 2);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = random([1, 1, 1, 1], 3);
        assert!(finite_difference_check(|t, v| Ok(t.sum(v)), &x, 0.0, 0.5).is_err());
    }
}
