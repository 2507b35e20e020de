//! Central finite differences, used as an independent oracle for
//! [`crate::graph::Graph::backward`].

use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function: one `(f(x+h), f(x-h))`
/// pair per element.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut buf = x.data().to_vec();
    let mut grad = Vec::with_capacity(buf.len());
    for i in 0..buf.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let plus = f(&Tensor::new(x.shape().to_vec(), buf.clone())?)?;
        buf[i] = orig - h;
        let minus = f(&Tensor::new(x.shape().to_vec(), buf.clone())?)?;
        buf[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `max |a - b|` normalized by the largest magnitude in either tensor.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.linf_distance(b)?;
    let scale = a.max_abs().max(b.max_abs());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.7 - 1.0);
        let g = finite_diff_gradient(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }
}
