//! Central-difference gradient checking against the tape.

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Max of `|a - c| / max(|a|, |c|, 1e-8)` over the checked coordinates.
    pub max_rel_error: f64,
    /// `max |a - c|` over the checked coordinates.
    pub max_abs_error: f64,
    /// `max |a|` over every coordinate.
    pub max_abs_grad: f64,
    pub checked: usize,
    /// Coordinates whose `±eps` probes straddle a kink of a leaky ReLU or abs.
    pub skipped: usize,
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

impl GradCheck {
    /// Error relative to the largest gradient component rather than each one.
    pub fn normwise_error(&self) -> f64 {
        self.max_abs_error / self.max_abs_grad.max(1e-300)
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: nan_max(self.max_rel_error, other.max_rel_error),
            max_abs_error: nan_max(self.max_abs_error, other.max_abs_error),
            max_abs_grad: self.max_abs_grad.max(other.max_abs_grad),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// `f` must build a scalar on the tape it receives from the leaf it is given.
/// A coordinate is skipped when either probe changes the branch of any
/// non-smooth op relative to `x`: the central difference there is not a
/// derivative estimate.
pub fn check_gradients<F>(f: F, x: &Tensor4, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (analytic, base) = {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone(), true);
        let loss = f(&mut tape, leaf)?;
        (tape.backward(loss)?.take(leaf), tape.branch_pattern())
    };
    let eval = |probe: Tensor4| -> Result<(f64, bool)> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(probe, false);
        let loss = f(&mut tape, leaf)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::arg("check_gradients", "function is not scalar"));
        }
        Ok((v.data()[0], tape.branch_pattern() == base))
    };

    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        max_abs_grad: analytic.data().iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        checked: 0,
        skipped: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, same_plus) = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let (minus, same_minus) = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        if !(same_plus && same_minus) {
            out.skipped += 1;
            continue;
        }
        let central = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        // NaN must surface as a failure.
        out.max_rel_error = nan_max(out.max_rel_error, rel);
        out.max_abs_error = nan_max(out.max_abs_error, (a - central).abs());
        out.checked += 1;
    }
    Ok(out)
}
