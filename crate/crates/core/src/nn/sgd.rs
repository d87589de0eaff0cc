//! Plain stochastic gradient descent over visited parameters.

use super::tensor::ParamVisitor;
use super::NnError;

/// p <- p - lr * g / scale, where `scale` is the effective batch size the
/// accumulated gradients were summed over.
///
/// Fails without touching any parameter if a gradient is not finite, so the
/// caller can abort with its last checkpoint intact.
pub fn sgd_step<M: ParamVisitor>(model: &mut M, lr: f64, scale: f64) -> Result<(), NnError> {
    let mut bad: Option<String> = None;
    model.for_each_param(&mut |name, p| {
        if bad.is_none() && !p.grad.all_finite() {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(NnError::GradientBlowUp { param: name });
    }
    model.for_each_param(&mut |_, p| {
        let g = p.grad.data();
        // Split borrow: copy is avoided by indexing.
        for i in 0..g.len() {
            let step = lr * g[i] / scale;
            p.value.data_mut()[i] -= step;
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Param;
    use approx::assert_abs_diff_eq;

    struct One {
        p: Param,
    }

    impl ParamVisitor for One {
        fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            f("p", &mut self.p);
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut m = One { p: Param::zeros(&[1]) };
        m.p.value.data_mut()[0] = 1.0;
        m.p.grad.data_mut()[0] = 2.0;
        sgd_step(&mut m, 0.0, 1.0).unwrap();
        assert_eq!(m.p.value.data()[0], 1.0);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut m = One { p: Param::zeros(&[1]) };
        m.p.value.data_mut()[0] = 1.0;
        m.p.grad.data_mut()[0] = 2.0;
        sgd_step(&mut m, 0.5, 1.0).unwrap();
        assert_abs_diff_eq!(m.p.value.data()[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn positive_gradient_decreases_parameter() {
        let mut m = One { p: Param::zeros(&[1]) };
        m.p.value.data_mut()[0] = 0.3;
        m.p.grad.data_mut()[0] = 1e-3;
        sgd_step(&mut m, 0.1, 1.0).unwrap();
        assert!(m.p.value.data()[0] < 0.3);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut m = One { p: Param::zeros(&[1]) };
        m.p.value.data_mut()[0] = 1.0;
        m.p.grad.data_mut()[0] = f64::NAN;
        let err = sgd_step(&mut m, 0.1, 1.0).unwrap_err();
        assert!(matches!(err, NnError::GradientBlowUp { .. }));
        assert_eq!(m.p.value.data()[0], 1.0);
    }

    #[test]
    fn accumulated_half_batches_equal_full_batch() {
        // Linear loss aggregation: gradients summed over two half batches and
        // divided by the full count must equal the full-batch mean gradient.
        let xs = [0.5, -1.0, 2.0, 0.25];
        let full_mean: f64 = xs.iter().map(|x| 2.0 * x).sum::<f64>() / xs.len() as f64;

        let mut m = One { p: Param::zeros(&[1]) };
        for half in xs.chunks(2) {
            for x in half {
                m.p.grad.data_mut()[0] += 2.0 * x;
            }
        }
        let accumulated_mean = m.p.grad.data()[0] / xs.len() as f64;
        assert_abs_diff_eq!(accumulated_mean, full_mean, epsilon = 1e-10);
    }
}
