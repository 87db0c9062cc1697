//! Dense f64 tensors and a tape-based reverse-mode differentiation engine.
//!
//! Design notes, fixed across the crate:
//!
//! * Storage is always row-major `Vec<f64>`; compute is f64 throughout and
//!   only narrowed to f32 at checkpoint boundaries.
//! * Differentiation is recorded on a [`Tape`]: every operation appends a
//!   node holding its output values plus enough bookkeeping to push
//!   gradients back to its inputs. `backward` walks the nodes in reverse
//!   insertion order, which is a valid topological order by construction.
//! * Elementwise binary ops broadcast over leading axes only: the smaller
//!   operand's shape must equal a suffix of the larger one's. Anything
//!   fancier is rejected rather than guessed at.
//! * Everything is deterministic. There is no internal threading, and all
//!   randomness flows through [`SeededRng`], so a fixed seed reproduces a
//!   training run bit for bit.

mod adam;
pub mod fd;
mod gemm;
mod rng;
mod tape;

pub use adam::AdamState;
pub use rng::SeededRng;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

/// Dense row-major tensor. `grad` is populated by [`Tape::write_back_grads`]
/// after a backward pass; repeated backward passes accumulate into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::usage(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), values.len()),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            values: vec![0.0; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            values: vec![value; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Standard normal entries drawn in row-major order from `rng`.
    pub fn randn(shape: &[usize], rng: &mut SeededRng) -> Self {
        Tensor {
            values: rng.normal_vec(numel(shape)),
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Zero the accumulated gradient, keeping the allocation.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::randn(&[4, 4], &mut SeededRng::new(7));
        let b = Tensor::randn(&[4, 4], &mut SeededRng::new(7));
        let c = Tensor::randn(&[4, 4], &mut SeededRng::new(8));
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn randn_moments_match_standard_normal() {
        // 100k draws: sample mean within 0.02, sample variance within 0.03.
        let t = Tensor::randn(&[100_000], &mut SeededRng::new(123));
        let n = t.values.len() as f64;
        let mean = t.values.iter().sum::<f64>() / n;
        let var = t.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
