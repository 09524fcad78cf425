use rand::Rng;

use crate::{NumError, Result};

/// Dense row-major f32 tensor.
///
/// Invariants: `product(shape) == data.len()` and every extent is ≥ 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(NumError::invalid(format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::invalid(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert!(shape.iter().all(|&e| e >= 1), "extents must be >= 1");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Gaussian init via Box-Muller so only `rand::Rng` is needed.
    pub fn randn(shape: &[usize], mean: f32, std: f32, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v = mean + std * z as f32;
        }
        t
    }

    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(lo..hi);
        }
        t
    }

    /// Kaiming-style init for a weight with `fan_in` inputs per output.
    pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f32).sqrt();
        Self::randn(shape, 0.0, std, rng)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(NumError::invalid(format!(
                "cannot reshape {} elements into {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        let a = Tensor::randn(&[16], 0.0, 1.0, &mut seeded_rng(7));
        let b = Tensor::randn(&[16], 0.0, 1.0, &mut seeded_rng(7));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(&[2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = t.clone().reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
    }
}
