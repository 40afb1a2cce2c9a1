use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean binary cross-entropy over the steps where `valid` is true.
pub fn loss<T: Scalar>(predictions: &[T], targets: &[bool], valid: &[bool]) -> Result<T> {
    if predictions.len() != targets.len() || predictions.len() != valid.len() {
        return Err(Error::Contract("loss inputs have different lengths".into()));
    }
    let eps = T::epsilon();
    let (sum, count) = predictions
        .iter()
        .zip(targets)
        .zip(valid)
        .filter(|(_, &v)| v)
        .fold((T::zero(), 0usize), |(s, c), ((&p, &t), _)| {
            let p = p.max(eps).min(T::one() - eps);
            let term = if t { -p.ln() } else { -(T::one() - p).ln() };
            (s + term, c + 1)
        });
    if count == 0 {
        return Err(Error::EmptyInput("loss over zero valid steps".into()));
    }
    Ok(sum / T::from_usize(count).expect("count"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_everywhere_is_ln_two() {
        let l = loss(&[0.5f64; 4], &[true, false, true, false], &[true, true, true, false]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_and_correct_tends_to_zero() {
        let l = loss(&[1.0 - 1e-12, 1e-12], &[true, false], &[true, true]).unwrap();
        assert!(l < 1e-10);
    }

    #[test]
    fn no_valid_steps() {
        assert!(loss(&[0.3f32], &[true], &[false]).is_err());
    }
}
