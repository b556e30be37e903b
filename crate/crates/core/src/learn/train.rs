use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Classifier, LabeledSample, LearnError, ModelKind, OptimizerState, TrainConfig};
use crate::hash::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch AdamW training on soft labels. Sample order is reshuffled every
/// epoch from a generator seeded by `config.seed`; the result is a pure
/// function of the inputs.
pub fn train_classifier(
    samples: &[LabeledSample],
    kind: ModelKind,
    classes: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome, LearnError> {
    config.validate()?;
    let first = samples.first().ok_or(LearnError::EmptyTrainingSet)?;
    let input_dim = first.features.dimension();
    for s in samples {
        super::check_sample(input_dim, classes, s)?;
    }

    let mut model = Classifier::init(kind, input_dim, classes, config);
    let mut optimizer = OptimizerState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = || chunk.iter().map(|&i| &samples[i]);
            let loss = model.batch_loss(batch())?;
            if !loss.is_finite() {
                trace.push(loss);
                return Err(LearnError::Divergence { epoch, trace });
            }
            let grads = model.gradients(batch())?;
            match optimizer.step(&mut model, &grads, config) {
                Ok(()) => {}
                Err(LearnError::NonFiniteGradient { .. }) => {
                    trace.push(f64::NAN);
                    return Err(LearnError::Divergence { epoch, trace });
                }
                Err(e) => return Err(e),
            }
            loss_sum += loss;
            batches += 1;
        }
        let mean = loss_sum / batches as f64;
        tracing::debug!(kind = kind.as_str(), epoch, loss = mean, "epoch finished");
        trace.push(mean);
        if !model.is_finite() {
            return Err(LearnError::Divergence { epoch, trace });
        }
    }
    Ok(TrainOutcome {
        classifier: model,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Features;

    fn tiny() -> Vec<LabeledSample> {
        (0..12)
            .map(|i| {
                let c = i % 2;
                let mut x = vec![0.0; 2];
                x[c] = 1.0;
                let mut t = vec![0.2; 2];
                t[c] = 0.8;
                LabeledSample {
                    features: Features::Dense(x),
                    target: t,
                    weight: 1.0,
                }
            })
            .collect()
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(matches!(
            train_classifier(&[], ModelKind::Mlp, 2, &TrainConfig::mlp()),
            Err(LearnError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn trace_has_one_entry_per_epoch() {
        let out = train_classifier(&tiny(), ModelKind::Head, 2, &TrainConfig::head()).unwrap();
        assert_eq!(out.loss_trace.len(), 5);
    }

    #[test]
    fn exploding_learning_rate_is_reported_as_divergence() {
        let mut samples = tiny();
        samples[0].features = Features::Dense(vec![1e300, 1e300]);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..TrainConfig::mlp()
        };
        let err = train_classifier(&samples, ModelKind::Head, 2, &cfg).unwrap_err();
        assert!(matches!(err, LearnError::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn class_mismatch_is_rejected() {
        assert!(matches!(
            train_classifier(&tiny(), ModelKind::Mlp, 3, &TrainConfig::mlp()),
            Err(LearnError::ClassMismatch { .. })
        ));
    }
}
