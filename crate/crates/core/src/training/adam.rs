use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8, with zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.second[i]
    }

    /// One update. Tensors whose `trainable` flag is false, or whose gradient
    /// is absent, are left bitwise untouched along with their moments.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
        trainable: &[bool],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || trainable.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {} params / {} grads / {} flags",
                self.first.len(),
                params.len(),
                grads.len(),
                trainable.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() || p.shape() != self.first[i].shape() {
                    return Err(Error::shape(format!(
                        "tensor {i}: param {:?}, grad {:?}, state {:?}",
                        p.shape(),
                        g.shape(),
                        self.first[i].shape()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if !trainable[i] {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = Tensor::scalar(0.5);
        let mut adam = Adam::new([&w]);
        adam.step(&mut [&mut w], &[Some(Tensor::scalar(1.0))], &[true], 0.1)
            .unwrap();
        // m̂ = 1, v̂ = 1, so the update is lr / (1 + ε).
        let want = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((w.item().unwrap() - want).abs() < 1e-15);
        assert!((w.item().unwrap() - 0.4).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut w = Tensor::scalar(2.0);
        let mut adam = Adam::new([&w]);
        adam.step(&mut [&mut w], &[Some(Tensor::scalar(0.0))], &[true], 0.1)
            .unwrap();
        assert_eq!(w.item().unwrap(), 2.0);

        adam.step(&mut [&mut w], &[Some(Tensor::scalar(1.0))], &[true], 0.1)
            .unwrap();
        let m = adam.first_moment(0).item().unwrap();
        let v = adam.second_moment(0).item().unwrap();
        let before = w.clone();
        adam.step(&mut [&mut w], &[Some(Tensor::scalar(0.0))], &[true], 0.1)
            .unwrap();
        assert_eq!(adam.first_moment(0).item().unwrap(), 0.9 * m);
        assert_eq!(adam.second_moment(0).item().unwrap(), 0.999 * v);
        // Momentum still moves the weight after the gradient vanished.
        assert!(w.item().unwrap() < before.item().unwrap());
    }

    #[test]
    fn frozen_tensor_is_untouched() {
        let mut a = Tensor::full(&[3], 1.25);
        let mut b = Tensor::full(&[2], -0.5);
        let mut adam = Adam::new([&a, &b]);
        let grads = [Some(Tensor::full(&[3], 3.0)), Some(Tensor::full(&[2], 7.0))];
        adam.step(&mut [&mut a, &mut b], &grads, &[true, false], 0.01)
            .unwrap();
        assert_ne!(a, Tensor::full(&[3], 1.25));
        assert_eq!(b, Tensor::full(&[2], -0.5));
        assert_eq!(adam.first_moment(1), &Tensor::zeros(&[2]));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut a = Tensor::full(&[3], 1.0);
        let mut adam = Adam::new([&a]);
        let err = adam.step(&mut [&mut a], &[Some(Tensor::zeros(&[4]))], &[true], 0.1);
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
