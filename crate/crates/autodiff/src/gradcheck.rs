//! Central finite differences, used as an independent oracle for gradients.
//!
//! Nothing here touches the tape's backward rules: the functions only evaluate
//! a caller-supplied forward closure at perturbed inputs.

use crate::tensor::Tensor;

/// Default step for central differences in `f64`.
pub const FD_STEP: f64 = 1e-5;

/// `∂f/∂inputs[which]` by central differences with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&[Tensor]) -> f64, inputs: &[Tensor], which: usize, h: f64) -> Tensor {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for k in 0..inputs[which].len() {
        let x0 = inputs[which].data()[k];
        work[which].data_mut()[k] = x0 + h;
        let fp = f(&work);
        work[which].data_mut()[k] = x0 - h;
        let fm = f(&work);
        work[which].data_mut()[k] = x0;
        grad.data_mut()[k] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
///
/// Two (near-)zero gradients compare as 0 when both norms are below `1e-10`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error: shape mismatch");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-10 {
        return diff;
    }
    diff / scale
}
