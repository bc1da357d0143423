use super::{Parameter, Real};

/// Stochastic gradient descent with classical momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// A gradient contained NaN or ±inf; no parameter was modified.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NonFiniteGradient {
    pub parameter: usize,
}

impl Sgd {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Sgd {
            learning_rate,
            ..Sgd::default()
        }
    }

    /// `buffer ← μ·buffer − lr·(grad + λ·value); value ← value + buffer`,
    /// then gradients are zeroed. A zero step leaves the value's bits alone
    /// (including the sign of zero). The whole step is skipped when any gradient
    /// is non-finite (gradients are still cleared).
    pub fn step<T: Real>(&self, params: &mut [&mut Parameter<T>]) -> Result<(), NonFiniteGradient> {
        let bad = params
            .iter()
            .position(|p| !p.gradient.all_finite());
        if let Some(parameter) = bad {
            params.iter_mut().for_each(|p| p.zero_grad());
            return Err(NonFiniteGradient { parameter });
        }
        let lr = T::lit(self.learning_rate);
        let mu = T::lit(self.momentum);
        let decay = T::lit(self.weight_decay);
        for p in params.iter_mut() {
            let Parameter {
                value,
                gradient,
                momentum_buffer,
            } = &mut **p;
            for ((v, g), b) in value
                .data_mut()
                .iter_mut()
                .zip(gradient.data())
                .zip(momentum_buffer.data_mut())
            {
                *b = mu * *b - lr * (*g + decay * *v);
                if *b != T::zero() {
                    *v = *v + *b;
                }
            }
            gradient.fill(T::zero());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(v: f32, g: f32) -> Parameter<f32> {
        let mut p = Parameter::new(Tensor::scalar(v));
        p.gradient = Tensor::scalar(g);
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = scalar(0.37, 0.0);
        let opt = Sgd {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[0.37]);
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = scalar(1.0, 1.0);
        let opt = Sgd {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(p.gradient.data(), &[0.0]);
    }

    #[test]
    fn momentum_unrolls_by_hand() {
        // delta1 = -lr·g, delta2 = μ·delta1 - lr·g = -lr·g·(1+μ)
        let (lr, mu, g) = (0.05f64, 0.9f64, 2.0f64);
        let opt = Sgd {
            learning_rate: lr,
            momentum: mu,
            weight_decay: 0.0,
        };
        let mut p = Parameter::new(Tensor::<f64>::scalar(3.0));
        p.gradient = Tensor::scalar(g);
        opt.step(&mut [&mut p]).unwrap();
        let after1 = p.value.data()[0];
        p.gradient = Tensor::scalar(g);
        opt.step(&mut [&mut p]).unwrap();
        let delta2 = p.value.data()[0] - after1;
        assert!((delta2 - (-lr * g * (1.0 + mu))).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let mut p = Parameter::new(Tensor::<f32>::from_vec(&[3], vec![1.5, -0.0, 7.25]).unwrap());
        let before = p.value.clone();
        p.gradient = Tensor::from_vec(&[3], vec![3.0, -1.0, 0.5]).unwrap();
        Sgd::with_learning_rate(0.0).step(&mut [&mut p]).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&before));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut a = scalar(1.0, 0.5);
        let mut b = scalar(2.0, f32::NAN);
        let err = Sgd::default().step(&mut [&mut a, &mut b]).unwrap_err();
        assert_eq!(err.parameter, 1);
        assert_eq!(a.value.data(), &[1.0]);
        assert_eq!(b.value.data(), &[2.0]);
    }
}
