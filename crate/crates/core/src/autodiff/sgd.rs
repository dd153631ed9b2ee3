use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Stochastic gradient descent with classical momentum:
/// `v ← μ·v + g`, then `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(SgdMomentum {
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies one update to every parameter carrying a gradient. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor<T>>,
    {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        let mu = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::ShapeMismatch {
                context: "optimizer state vs parameter count",
                left: vec![self.velocity.len()],
                right: vec![params.len()],
            });
        }
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            if v.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    context: "velocity vs parameter",
                    left: vec![v.len()],
                    right: p.shape().to_vec(),
                });
            }
            match p.grad().map(<[T]>::to_vec) {
                Some(g) => {
                    for (vi, gi) in v.iter_mut().zip(&g) {
                        *vi = mu * *vi + *gi;
                    }
                }
                None => {
                    for vi in v.iter_mut() {
                        *vi = mu * *vi;
                    }
                }
            }
            for (w, vi) in p.data_mut().iter_mut().zip(v.iter()) {
                *w = *w - lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor<f64> {
        let mut p = Tensor::new([1], vec![value])
            .unwrap()
            .with_requires_grad(true);
        p.accumulate_grad(&[grad]).unwrap();
        p
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = param(1.0, 0.5);
        let mut opt = SgdMomentum::new(0.0).unwrap();
        opt.step([&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_zero_velocity_is_noop() {
        let mut p = param(1.25, 0.0);
        let mut opt = SgdMomentum::new(0.9).unwrap();
        opt.step([&mut p], 0.1).unwrap();
        assert_eq!(p.data()[0], 1.25);
    }

    #[test]
    fn two_steps_constant_gradient() {
        // v1 = g, v2 = 0.9 g + g  =>  w2 = w0 - lr g (1 + 1.9)
        let (w0, g, lr) = (2.0, 0.3, 0.05);
        let mut p = param(w0, g);
        let mut opt = SgdMomentum::new(0.9).unwrap();
        opt.step([&mut p], lr).unwrap();
        opt.step([&mut p], lr).unwrap();
        let want = w0 - lr * g * (1.0 + 1.9);
        assert!((p.data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        assert!(SgdMomentum::<f64>::new(1.0).is_err());
        let mut opt = SgdMomentum::new(0.5).unwrap();
        let mut a = param(0.0, 1.0);
        opt.step([&mut a], 0.1).unwrap();
        let mut b = Tensor::new([2], vec![0.0, 0.0]).unwrap();
        assert!(opt.step([&mut b], 0.1).is_err());
        assert!(opt.step([&mut a], -1.0).is_err());
    }
}
