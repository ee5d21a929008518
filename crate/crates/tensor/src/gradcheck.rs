//! Central finite differences, the independent oracle for `backward`.

use crate::element::Element;
use crate::error::{invalid, Result, TensorError};
use crate::tensor::NdTensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &NdTensor<T>, h: f64) -> Result<NdTensor<T>>
where
    T: Element,
    F: FnMut(&NdTensor<T>) -> Result<NdTensor<T>>,
{
    if !(h > 0.0) {
        return Err(invalid("finite_diff_grad", format!("step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.f64() + h);
        let plus = scalar_of(f(&probe)?)?;
        probe.data_mut()[i] = T::of(orig.f64() - h);
        let minus = scalar_of(f(&probe)?)?;
        probe.data_mut()[i] = orig;
        out.push(T::of((plus - minus) / (2.0 * h)));
    }
    NdTensor::new(x.shape().to_vec(), out)
}

fn scalar_of<T: Element>(t: NdTensor<T>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item().f64())
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error<T: Element>(a: &NdTensor<T>, b: &NdTensor<T>, floor: f64) -> f64 {
    let norm = |t: &NdTensor<T>| t.data().iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(floor)
}
