use crate::error::{Error, Result};
use crate::numcore::tape::ParamStore;

/// One SGD update with global-norm clipping; gradients are zeroed afterwards.
///
/// Returns the pre-clipping global gradient norm.
pub fn sgd_step(params: &mut ParamStore, lr: f64, clip_norm: f64) -> Result<f64> {
    let in_range = lr >= 0.0 && lr.is_finite() && clip_norm > 0.0;
    if !in_range {
        return Err(Error::Config(format!(
            "sgd_step: lr {lr} / clip_norm {clip_norm} out of range"
        )));
    }
    let mut sq = 0.0;
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter '{}'", p.name)));
        }
        sq += p.grad.sum_squares();
    }
    let norm = sq.sqrt();
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    for p in params.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * (g * scale);
        }
        p.grad.fill(0.0);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value));
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn plain_update() {
        let mut s = single(1.0, 0.5);
        sgd_step(&mut s, 0.1, 10.0).unwrap();
        assert!((s.iter().next().unwrap().value.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(s.iter().next().unwrap().grad.data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = single(1.25, 0.0);
        sgd_step(&mut s, 0.7, 1.0).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.25);
    }

    #[test]
    fn clipping_scales_by_ratio() {
        // grads (12, 16): norm 20, clip 5 -> scale 0.25 -> effective (3, 4)
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(0.0));
        let b = s.add("b", Tensor::scalar(0.0));
        s.get_mut(a).grad = Tensor::scalar(12.0);
        s.get_mut(b).grad = Tensor::scalar(16.0);
        let oracle_norm = (12.0f64 * 12.0 + 16.0 * 16.0).sqrt();
        let norm = sgd_step(&mut s, 1.0, 5.0).unwrap();
        assert_eq!(norm, oracle_norm);
        assert!((s.value(a).data()[0] + 3.0).abs() < 1e-12);
        assert!((s.value(b).data()[0] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut s = single(0.123456789, 3.5);
        sgd_step(&mut s, 0.0, 1.0).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data()[0].to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = single(1.0, f64::NAN);
        let err = sgd_step(&mut s, 0.1, 1.0).unwrap_err();
        assert!(err.to_string().contains("'w'"));
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.0);
    }
}
