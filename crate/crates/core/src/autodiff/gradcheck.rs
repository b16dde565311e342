//! Central finite differences, used as an oracle against [`Tape::backward`](super::Tape::backward).

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of a tensor.
///
/// The step actually realized in `f32` is used as the denominator, which
/// removes most of the rounding bias of perturbing single-precision inputs.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let (up, down) = (orig + h, orig - h);
        probe.data_mut()[i] = up;
        let f_up = f(&probe)?;
        probe.data_mut()[i] = down;
        let f_down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let step = f64::from(up) - f64::from(down);
        grad.push(((f_up - f_down) / step) as f32);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Central-difference gradient in double precision.
pub fn finite_diff_grad_f64<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative disagreement between two gradient entries, treating both as
/// equal when their absolute gap is below `abs_floor`.
pub fn grad_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    let gap = (a - b).abs();
    gap <= abs_floor || gap <= rel * a.abs().max(b.abs())
}
