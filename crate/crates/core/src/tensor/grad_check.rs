use super::Tensor;

/// Central-difference estimate of the gradient of `f` at `x`:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute difference norm when both
/// vectors are (near) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
