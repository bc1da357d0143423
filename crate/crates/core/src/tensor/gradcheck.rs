//! Central-difference gradient verification.

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// A differentiable scalar objective over a flat parameter vector.
///
/// `evaluate` also returns a signature of every piecewise branch taken
/// (leaky-ReLU signs, max-pool winners). When a perturbation changes the
/// signature the difference quotient straddles a kink and the checker
/// retries with a smaller step.
pub trait Differentiable {
    fn num_params(&self) -> usize;
    fn param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, value: f64);
    fn evaluate(&mut self) -> (f64, u64);
    /// Analytic gradient of the objective at the current parameters.
    fn gradient(&mut self) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub params_checked: usize,
    /// Parameters whose step had to shrink to stay on one side of a kink.
    pub refined: usize,
}

fn central_difference<M: Differentiable>(model: &mut M, i: usize, orig: f64, step: f64, sig: u64) -> (f64, bool) {
    model.set_param(i, orig + step);
    let (plus, sig_p) = model.evaluate();
    model.set_param(i, orig - step);
    let (minus, sig_m) = model.evaluate();
    ((plus - minus) / (2.0 * step), sig_p == sig && sig_m == sig)
}

/// Compares the analytic gradient with central differences for every
/// parameter and reports the worst relative error. The numeric derivative
/// extrapolates central differences at `eps` and `eps/2`.
pub fn finite_difference_check<M: Differentiable>(model: &mut M, eps: f64) -> GradCheckReport {
    let analytic = model.gradient();
    let (_, base_sig) = model.evaluate();
    let mut worst: f64 = 0.0;
    let mut refined = 0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = model.param(i);
        let mut step = eps;
        let mut numeric = 0.0;
        for attempt in 0..4 {
            let (full, ok_full) = central_difference(model, i, orig, step, base_sig);
            let (half, ok_half) = central_difference(model, i, orig, 0.5 * step, base_sig);
            // Richardson step: cancels the O(step²) truncation term.
            numeric = (4.0 * half - full) / 3.0;
            if ok_full && ok_half {
                break;
            }
            if attempt == 0 {
                refined += 1;
            }
            step *= 0.01;
        }
        model.set_param(i, orig);
        let err = relative_error(a, numeric);
        if err.is_finite() {
            worst = worst.max(err);
        } else {
            worst = f64::INFINITY;
        }
    }
    GradCheckReport {
        max_relative_error: worst,
        params_checked: analytic.len(),
        refined,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic(Vec<f64>);

    impl Differentiable for Quadratic {
        fn num_params(&self) -> usize {
            self.0.len()
        }
        fn param(&self, i: usize) -> f64 {
            self.0[i]
        }
        fn set_param(&mut self, i: usize, value: f64) {
            self.0[i] = value;
        }
        fn evaluate(&mut self) -> (f64, u64) {
            (self.0.iter().map(|x| x * x * x).sum(), 0)
        }
        fn gradient(&mut self) -> Vec<f64> {
            self.0.iter().map(|x| 3.0 * x * x).collect()
        }
    }

    #[test]
    fn smooth_objective_passes() {
        let r = finite_difference_check(&mut Quadratic(vec![0.3, -1.2, 2.0]), 1e-3);
        assert!(r.max_relative_error < 1e-5);
        assert_eq!(r.params_checked, 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        struct Wrong(Quadratic);
        impl Differentiable for Wrong {
            fn num_params(&self) -> usize {
                self.0.num_params()
            }
            fn param(&self, i: usize) -> f64 {
                self.0.param(i)
            }
            fn set_param(&mut self, i: usize, v: f64) {
                self.0.set_param(i, v)
            }
            fn evaluate(&mut self) -> (f64, u64) {
                self.0.evaluate()
            }
            fn gradient(&mut self) -> Vec<f64> {
                self.0.gradient().iter().map(|g| g * 1.01).collect()
            }
        }
        let r = finite_difference_check(&mut Wrong(Quadratic(vec![1.0])), 1e-3);
        assert!(r.max_relative_error > 1e-3);
    }

    #[test]
    fn relative_error_guards_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-9, 0.0) <= 0.1);
    }
}
