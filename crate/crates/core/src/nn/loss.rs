//! Loss functions and their gradients.

use super::NnError;

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Returns `(loss, dL/dlogits)` with loss = -log softmax(logits)[target].
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>), NnError> {
    if target >= logits.len() {
        return Err(NnError::TokenOutOfRange { token: target, vocab: logits.len() });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits {
        sum += (v - max).exp();
    }
    let log_sum = sum.ln() + max;
    let loss = log_sum - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - log_sum).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Binary cross-entropy on a raw logit. Returns `(loss, dL/dlogit)`.
///
/// Uses the softplus form so large logits of either sign do not overflow.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    // loss = softplus(logit) - target * logit
    let softplus = if logit > 0.0 { logit + (-logit).exp().ln_1p() } else { logit.exp().ln_1p() };
    let loss = softplus - target * logit;
    let grad = sigmoid(logit) - target;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_logits_give_ln_v() {
        let (loss, grad) = softmax_cross_entropy(&[0.4, 0.4, 0.4], 1).unwrap();
        assert_abs_diff_eq!(loss, 3.0_f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(grad.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn peaked_logits_match_brute_force() {
        // Brute-force softmax over the three outcomes.
        let logits = [10.0_f64, 0.0, 0.0];
        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let expected = -(exps[0] / z).ln();
        let (loss, _) = softmax_cross_entropy(&logits, 0).unwrap();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 9.08e-5, epsilon = 1e-7);
    }

    #[test]
    fn gradient_sums_to_zero_and_probs_are_a_pmf() {
        let logits = [3.0, -2.0, 0.5, 7.5];
        let p = softmax(&logits);
        assert!(p.iter().all(|v| *v >= 0.0));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let (_, grad) = softmax_cross_entropy(&logits, 3).unwrap();
        assert_abs_diff_eq!(grad.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn target_out_of_range_is_an_error() {
        assert!(softmax_cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn bce_matches_naive_form() {
        for &(logit, y) in &[(0.0, 1.0), (2.5, 0.0), (-3.0, 1.0), (40.0, 0.0)] {
            let (loss, grad) = bce_with_logit(logit, y);
            let p: f64 = sigmoid(logit);
            let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            if naive.is_finite() {
                assert_abs_diff_eq!(loss, naive, epsilon = 1e-9);
            }
            assert_abs_diff_eq!(grad, p - y, epsilon = 1e-12);
        }
        // sigma(0) = 0.5 -> ln 2.
        assert_abs_diff_eq!(bce_with_logit(0.0, 1.0).0, 2.0_f64.ln(), epsilon = 1e-12);
    }
}
