use super::{Classifier, LearnError, TrainConfig};

/// AdamW moment accumulators, one buffer per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &Classifier) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .blocks()
            .iter()
            .map(|(_, b)| vec![0.0; b.len()])
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One AdamW update:
    /// `p ← p − lr·(m̂ / (√v̂ + ε) + λ·p)` with bias-corrected moments and
    /// decay decoupled from the gradient.
    pub fn step(
        &mut self,
        params: &mut Classifier,
        grads: &Classifier,
        config: &TrainConfig,
    ) -> Result<(), LearnError> {
        let grad_blocks = grads.blocks();
        if grad_blocks.len() != self.first.len() || grads.kind() != params.kind() {
            return Err(LearnError::Config(
                "gradient layout does not match parameters".into(),
            ));
        }
        for (name, g) in &grad_blocks {
            if let Some((index, value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(LearnError::NonFiniteGradient {
                    block: name,
                    index,
                    value: *value,
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (config.beta1, config.beta2);
        let correction1 = 1.0 - b1.powi(t);
        let correction2 = 1.0 - b2.powi(t);
        let lr = config.learning_rate;
        let decay = config.weight_decay;

        for (((_, p), (_, g)), (m, v)) in params
            .blocks_mut()
            .into_iter()
            .zip(grad_blocks)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            if p.len() != g.len() {
                return Err(LearnError::Config("gradient block size mismatch".into()));
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + config.epsilon) + decay * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::HeadParams;
    use ndarray::{Array1, Array2};

    fn scalar(value: f64) -> Classifier {
        Classifier::Head(HeadParams {
            w: Array2::from_elem((1, 1), value),
            b: Array1::zeros(1),
        })
    }

    fn cfg(lr: f64, decay: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            weight_decay: decay,
            ..TrainConfig::mlp()
        }
    }

    fn w(c: &Classifier) -> f64 {
        c.blocks()[0].1[0]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar(0.75);
        let mut s = OptimizerState::new(&p);
        s.step(&mut p, &scalar(0.0), &cfg(0.1, 0.0)).unwrap();
        assert_eq!(w(&p), 0.75);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_multiplicatively() {
        let mut p = scalar(2.0);
        let mut s = OptimizerState::new(&p);
        let c = cfg(0.01, 0.5);
        s.step(&mut p, &scalar(0.0), &c).unwrap();
        assert!((w(&p) - 2.0 * (1.0 - 0.01 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + ε).
        let mut p = scalar(0.0);
        let mut s = OptimizerState::new(&p);
        s.step(&mut p, &scalar(1.0), &cfg(0.1, 1e-4)).unwrap();
        assert!((w(&p) - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w(&p) + 0.1).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p);
        let err = s
            .step(&mut p, &scalar(f64::NAN), &cfg(0.1, 0.0))
            .unwrap_err();
        assert!(matches!(
            err,
            LearnError::NonFiniteGradient {
                block: "w",
                index: 0,
                ..
            }
        ));
        assert_eq!(w(&p), 1.0);
        assert_eq!(s.steps(), 0);
    }
}
