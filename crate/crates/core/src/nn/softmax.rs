use crate::scalar::Scalar;

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut probs: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = probs.iter().copied().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    probs
}

/// Cross-entropy `-ln p[target]` in nats together with the probabilities.
///
/// The loss is computed from the log-sum-exp directly so that confident
/// predictions do not lose precision through `ln(p)`.
pub fn softmax_xent<T: Scalar>(logits: &[T], target: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let loss = sum.ln() - (logits[target] - max);
    (loss, softmax(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits() {
        let (loss, probs) = softmax_xent(&[0.3f64; 6], 4);
        assert_relative_eq!(loss, 6f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(loss, 1.791_759, epsilon = 1e-6);
        for p in probs {
            assert_relative_eq!(p, 1.0 / 6.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let (loss, probs) = softmax_xent(&[1000.0f64, 0.0], 0);
        assert!(loss.is_finite() && loss.abs() < 1e-300);
        assert_eq!(probs[0], 1.0);
        let (loss, _) = softmax_xent(&[1000.0f64, 0.0], 1);
        assert_relative_eq!(loss, 1000.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form() {
        let (loss, _) = softmax_xent(&[1.0f64, 2.0, 3.0], 2);
        let expected = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert_relative_eq!(loss, expected, epsilon = 1e-15);
        assert_relative_eq!(loss, 0.407_61, epsilon = 1e-5);
    }

    proptest! {
        #[test]
        fn simplex_and_shift_invariance(logits in proptest::collection::vec(-30.0f64..30.0, 1..10), shift in -100.0f64..100.0) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
            prop_assert_eq!(argmax(&logits), argmax(&shifted));
        }
    }
}
