use crate::{Real, Result, Tensor, TensorError};

/// RMSProp with a per-parameter running mean of squared gradients:
///
/// ```text
/// s <- decay * s + (1 - decay) * g^2
/// p <- p - lr * g / (sqrt(s) + eps)
/// ```
#[derive(Clone, Debug)]
pub struct RmsProp<T: Real = f32> {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    state: Vec<Tensor<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(lr: f64, decay: f64, eps: f64) -> Self {
        Self {
            lr,
            decay,
            eps,
            state: Vec::new(),
        }
    }

    pub fn state(&self) -> &[Tensor<T>] {
        &self.state
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "rmsprop_update",
                    expected: format!("{:?}", p.shape()),
                    got: g.shape().to_vec(),
                });
            }
            g.ensure_finite("rmsprop_update")?;
        }
        if self.state.is_empty() {
            self.state = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let (lr, decay, eps) = (T::from_f64(self.lr), T::from_f64(self.decay), T::from_f64(self.eps));
        let keep = T::one() - decay;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.state) {
            for ((pv, &gv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                *sv = decay * *sv + keep * gv * gv;
                *pv -= lr * gv / (sv.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::from_fn(&[3], |i| i as f64)];
        let before = p.clone();
        let mut opt = RmsProp::new(0.01, 0.9, 1e-6);
        opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_formula() {
        let mut p = vec![Tensor::<f64>::zeros(&[1])];
        let mut opt = RmsProp::new(0.01, 0.9, 1e-6);
        opt.step(&mut p, &[Tensor::full(&[1], 1.0)]).unwrap();
        let want = -0.01 / (0.1f64.sqrt() + 1e-6);
        assert!((p[0].item() - want).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_shrink() {
        let mut p = vec![Tensor::<f64>::zeros(&[1])];
        let mut opt = RmsProp::new(0.01, 0.9, 1e-6);
        let g = [Tensor::full(&[1], 1.0)];
        opt.step(&mut p, &g).unwrap();
        let d1 = p[0].item();
        opt.step(&mut p, &g).unwrap();
        let d2 = p[0].item() - d1;
        assert!(d2.abs() < d1.abs());
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut p = vec![Tensor::<f64>::zeros(&[2])];
        let mut opt = RmsProp::new(0.01, 0.9, 1e-6);
        let g = [Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap()];
        assert!(opt.step(&mut p, &g).is_err());
        assert_eq!(p[0], Tensor::zeros(&[2]));
        assert!(opt.state().is_empty());
    }
}
