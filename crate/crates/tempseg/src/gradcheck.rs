//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::TensorBase;

pub type Tensor = TensorBase<f64>;

/// Compares `analytic` against central differences of `f` at `x`, entry by
/// entry, and returns the largest relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `entries` restricts the check to a subset of coordinates (useful when `x`
/// is a large parameter vector); `None` checks every entry.
pub fn grad_check(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    analytic: &Tensor,
    x: &Tensor,
    epsilon: f64,
    entries: Option<&[usize]>,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "grad_check epsilon {} outside [1e-7, 1e-3]",
            epsilon
        )));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!(
            "analytic gradient shape {:?} does not match input shape {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let all: Vec<usize>;
    let idx = match entries {
        Some(e) => e,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &k in idx {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + epsilon;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - epsilon;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("f at perturbed entry {}", k)));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[k];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::TapeBase;
    use rand::SeedableRng;

    #[test]
    fn sum_of_squares_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::uniform(&[10], 2.0, &mut rng);
        let analytic = x.map(|v| 2.0 * v);
        let err = grad_check(|t| Ok(t.iter().map(|v| v * v).sum()), &analytic, &x, 1e-5, None)
            .unwrap();
        assert!(err <= 1e-6, "error {}", err);
    }

    #[test]
    fn conv_sum_gradient() {
        use crate::kernels::ConvKind;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[2, 8, 8], 1.0, &mut rng);
        let weight = Tensor::uniform(&[3, 2, 3, 3], 0.5, &mut rng);
        let bias = Tensor::uniform(&[3], 0.5, &mut rng);
        let f = |t: &Tensor| -> Result<f64> {
            let mut tape = TapeBase::new();
            let xi = tape.leaf(t.clone(), false);
            let wi = tape.leaf(weight.clone(), false);
            let bi = tape.leaf(bias.clone(), false);
            let y = tape.conv2d(xi, wi, Some(bi), 1, ConvKind::Full)?;
            let s = tape.sum(y);
            Ok(tape.value(s).data()[0])
        };
        let mut tape = TapeBase::new();
        let xi = tape.leaf(x.clone(), true);
        let wi = tape.leaf(weight.clone(), false);
        let bi = tape.leaf(bias.clone(), false);
        let y = tape.conv2d(xi, wi, Some(bi), 1, ConvKind::Full).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(&[(s, Tensor::scalar(1.0))]).unwrap();
        let err = grad_check(f, grads.get(xi).unwrap(), &x, 1e-5, None).unwrap();
        assert!(err <= 1e-4, "error {}", err);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::filled(&[4], 1.5);
        let analytic = Tensor::zeros(&[4]);
        let err = grad_check(|_| Ok(3.25), &analytic, &x, 1e-5, None).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn epsilon_bounds_enforced() {
        let x = Tensor::zeros(&[1]);
        let a = Tensor::zeros(&[1]);
        assert!(grad_check(|_| Ok(0.0), &a, &x, 1e-2, None).is_err());
        assert!(grad_check(|_| Ok(0.0), &a, &x, 1e-8, None).is_err());
    }

    #[test]
    fn non_finite_function_rejected() {
        let x = Tensor::zeros(&[1]);
        let a = Tensor::zeros(&[1]);
        assert!(matches!(
            grad_check(|_| Ok(f64::NAN), &a, &x, 1e-5, None),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn detects_injected_sign_flip() {
        // harness self-test: a wrong analytic gradient must be flagged
        let x = Tensor::filled(&[3], 1.0);
        let analytic = x.map(|v| -2.0 * v);
        let err = grad_check(|t| Ok(t.iter().map(|v| v * v).sum()), &analytic, &x, 1e-5, None)
            .unwrap();
        assert!(err > 1e-2);
    }
}
