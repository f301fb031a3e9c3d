//! Dense tensors with a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is the owned storage used for model parameters and for the
//! activations that cross the client/server cut. All differentiable math
//! happens on a [`Tape`]: parameters are copied onto the tape as leaves,
//! operations append nodes, and [`Tape::backward`] walks the nodes in reverse
//! to produce [`Gradients`]. A tape is built per step and dropped afterwards.

pub mod gradcheck;
mod kernels;
mod optim;
mod tape;

pub use gradcheck::{check as gradcheck, GradCheck};
pub use optim::{adam_step, Adam, AdamConfig};
pub use tape::{AttentionMask, Gradients, Tape, Var, IGNORE_INDEX};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense array of `f64` with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Splits the gradient out, leaving the tensor without one.
    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks `L × 1 × d` tensors along the batch axis into `L × M × d`.
    pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack_batch of zero tensors".into()))?;
        if first.shape.len() != 3 {
            return Err(Error::shape("stack_batch", &first.shape, &[0, 0, 0]));
        }
        let (len, width) = (first.shape[0], first.shape[2]);
        let mut batch = 0;
        for p in parts {
            if p.shape.len() != 3 || p.shape[0] != len || p.shape[2] != width {
                return Err(Error::shape("stack_batch", &first.shape, &p.shape));
            }
            batch += p.shape[1];
        }
        let mut data = Vec::with_capacity(len * batch * width);
        for l in 0..len {
            for p in parts {
                let b = p.shape[1];
                data.extend_from_slice(&p.data[l * b * width..(l + 1) * b * width]);
            }
        }
        Tensor::new(vec![len, batch, width], data)
    }

    /// Inverse of [`Tensor::stack_batch`]: splits `L × M × d` into pieces of
    /// the given batch sizes.
    pub fn split_batch(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if self.shape.len() != 3 || sizes.iter().sum::<usize>() != self.shape[1] {
            return Err(Error::shape("split_batch", &self.shape, sizes));
        }
        let (len, batch, width) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out: Vec<Vec<f64>> = sizes
            .iter()
            .map(|b| Vec::with_capacity(len * b * width))
            .collect();
        for l in 0..len {
            let mut offset = 0;
            for (i, &b) in sizes.iter().enumerate() {
                let start = (l * batch + offset) * width;
                out[i].extend_from_slice(&self.data[start..start + b * width]);
                offset += b;
            }
        }
        sizes
            .iter()
            .zip(out)
            .map(|(&b, d)| Tensor::new(vec![len, b, width], d))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn accumulate_grad_sums() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn stack_then_split_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let parts: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[4, 1, 5], 1.0, &mut rng))
            .collect();
        let stacked = Tensor::stack_batch(&parts).unwrap();
        assert_eq!(stacked.shape(), &[4, 3, 5]);
        // element (l, b, :) comes from part b
        assert_eq!(stacked.data()[(2 * 3 + 1) * 5], parts[1].data()[2 * 5]);
        let back = stacked.split_batch(&[1, 1, 1]).unwrap();
        assert_eq!(back, parts);
    }

    #[test]
    fn randn_is_seeded() {
        let a = Tensor::randn(&[8], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let b = Tensor::randn(&[8], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.is_finite());
    }
}
