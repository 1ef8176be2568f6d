//! Central finite differences, used as an independent oracle for
//! [`Tape::backward`](crate::Tape::backward).

use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to every element of
/// every tensor in `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if !(step > 0.0) {
        return Err(invalid("finite_diff_grad", format!("step must be positive, got {step}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = vec![0.0; params[p].numel()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let hi = f(&work);
            work[p].data_mut()[i] = orig - step;
            let lo = f(&work);
            work[p].data_mut()[i] = orig;
            for v in [hi, lo] {
                if !v.is_finite() {
                    return Err(TensorError::NonFinite(v));
                }
            }
            *slot = (hi - lo) / (2.0 * step);
        }
        out.push(Tensor::new(params[p].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)` over all entries of
/// both gradient lists. Zero when both are zero.
pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (a, b) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(b.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    let scale = f64::max(na, nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}
