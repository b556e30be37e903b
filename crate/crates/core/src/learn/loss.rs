use super::LearnError;

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-weight * Σ target_k ln(max(y_k, 1e-12))`.
pub fn soft_cross_entropy(y: &[f64], target: &[f64], weight: f64) -> Result<f64, LearnError> {
    if y.len() != target.len() {
        return Err(LearnError::ClassMismatch {
            expected: y.len(),
            found: target.len(),
        });
    }
    let ce: f64 = y
        .iter()
        .zip(target)
        .map(|(p, t)| {
            if *t == 0.0 {
                0.0
            } else {
                t * p.max(PROB_FLOOR).ln()
            }
        })
        .sum();
    Ok(-weight * ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_half_against_one_hot_is_ln2() {
        let l = soft_cross_entropy(&[0.5, 0.5], &[1.0, 0.0], 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_one_hot_is_zero() {
        assert_eq!(
            soft_cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0], 3.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn saturated_output_is_floored() {
        let l = soft_cross_entropy(&[0.0, 1.0], &[1.0, 0.0], 1.0).unwrap();
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch() {
        assert!(soft_cross_entropy(&[1.0], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(softmax(&[3.0, 3.0, 3.0, 3.0]), vec![0.25; 4]);
    }

    fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        // Gibbs: cross-entropy against a fixed target is minimized at y = target,
        // where it equals weight * entropy(target).
        #[test]
        fn minimized_at_target((t, y) in (2usize..8).prop_flat_map(|n| (distribution(n), distribution(n))), w in 0.1f64..5.0) {
            let at_target = soft_cross_entropy(&t, &t, w).unwrap();
            let entropy: f64 = -t.iter().map(|p| p * p.ln()).sum::<f64>();
            prop_assert!((at_target - w * entropy).abs() < 1e-12);
            prop_assert!(at_target >= 0.0);
            prop_assert!(soft_cross_entropy(&y, &t, w).unwrap() >= at_target - 1e-12);
        }

        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..10)) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-20.0f64..20.0, 1..10), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
