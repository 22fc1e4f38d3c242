//! Minimal dense-tensor autodiff: forward kernels, a reverse-mode tape, and
//! a finite-difference gradient checker.

pub mod gradcheck;
pub mod kernels;
pub mod tape;

pub use gradcheck::{check_gradients, GradCheck};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Max-subtracted softmax of a plain vector.
pub fn softmax_vec(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::arg("softmax_vec", "empty logits"));
    }
    let mut out = logits.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let s = softmax_vec(&[0.0, 0.0, 0.0]).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_no_overflow() {
        let s = softmax_vec(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-12);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(softmax_vec(&[]), Err(Error::Argument { .. })));
    }
}
