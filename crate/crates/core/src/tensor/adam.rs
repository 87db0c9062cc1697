//! Adam with bias correction. State is positional: the i-th moment pair
//! belongs to the i-th parameter tensor handed to `step`, every time. A
//! mismatch in count or size means the caller desynchronized model and
//! optimizer and is an error, not a silent re-init.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_sizes: &[usize], lr: f64) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. If any gradient is non-finite the
    /// step is aborted before touching parameters or moments.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::usage(
                "adam_step",
                format!(
                    "optimizer tracks {} parameters, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::usage(
                    "adam_step",
                    format!(
                        "parameter {} has {} values, gradient {}, state {}",
                        i,
                        p.numel(),
                        g.len(),
                        self.m[i].len()
                    ),
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter {} at optimizer step {}",
                    i,
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.values[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.values.clone();
        let mut adam = AdamState::new(&[3], 0.001);
        adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p.values, before);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut adam = AdamState::new(&[2], 0.001);
        adam.step(&mut [&mut p], &[&[5.0, -0.3]]).unwrap();
        // Bias correction makes the t=1 update lr * sign(g) up to eps.
        assert!((p.values[0] + 0.001).abs() < 1e-6, "{}", p.values[0]);
        assert!((p.values[1] - 0.001).abs() < 1e-6, "{}", p.values[1]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = w^2, grad = 2w, from w = 1: 200 steps at lr 0.01 ends near 0.
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut adam = AdamState::new(&[1], 0.01);
        for _ in 0..200 {
            let g = [2.0 * p.values[0]];
            adam.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.values[0].abs() < 0.1, "w = {}", p.values[0]);
    }

    #[test]
    fn nan_gradient_aborts_without_state_change() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut adam = AdamState::new(&[2], 0.001);
        let err = adam.step(&mut [&mut p], &[&[1.0, f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Training(_)), "{err}");
        assert_eq!(p.values, vec![1.0, 2.0]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn desynced_state_is_rejected() {
        let mut p = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        let mut adam = AdamState::new(&[3], 0.001);
        assert!(adam.step(&mut [&mut p], &[&[0.0, 0.0]]).is_err());
    }
}
