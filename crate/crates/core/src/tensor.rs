//! Dense row-major f64 tensors and the central-difference gradient oracle.

use crate::error::{Error, Result};

/// A dense N-dimensional tensor of 64-bit floats, stored row-major.
///
/// `grad`, when present, always has the same length as `data` and holds the
/// accumulated gradient of some scalar loss with respect to this tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::invalid("Tensor::new", format!("zero dimension in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(
                "Tensor::new",
                format!("data length {} does not match shape {:?} (numel {})", data.len(), shape, numel),
            ));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None, requires_grad: false }
    }

    /// Scalar wrapper, shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        } else if self.requires_grad {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Central-difference gradient of a scalar function, the independent oracle
/// used to validate every analytic backward rule in this crate.
///
/// Returns a tensor of the same shape as `x` with entry i equal to
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite_difference_grad: step must be positive");
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }
    Tensor { shape: x.shape.clone(), data: grad, grad: None, requires_grad: false }
}

/// Relative error between two gradient blocks: max-norm of the difference over
/// the larger of the two max-norms. The floor keeps finite-difference rounding
/// noise from dominating when a whole block is numerically zero.
pub fn block_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "block_relative_error: length mismatch");
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|x| x.abs())
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    diff / scale.max(1e-12)
}
