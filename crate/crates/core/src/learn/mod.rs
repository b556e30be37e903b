//! Prompt-to-expert classifiers: a two-layer perceptron over sparse
//! bag-of-words input and a softmax head over frozen sentence embeddings,
//! trained on soft labels with AdamW.

mod gradcheck;
mod head;
mod loss;
mod mlp;
mod optim;
mod persist;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::Features;

pub use gradcheck::{gradient_check, GradientCheck};
pub use head::{head_init, HeadParams};
pub use loss::{soft_cross_entropy, softmax, PROB_FLOOR};
pub use mlp::{mlp_forward, mlp_init, MlpForward, MlpParams};
pub use optim::OptimizerState;
pub use persist::{load_classifier, save_classifier, ClassifierHeader};
pub use train::{train_classifier, TrainOutcome};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("input dimension {found} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("target has {found} classes, model has {expected}")]
    ClassMismatch { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training split")]
    EmptyTrainingSet,
    #[error("non-finite gradient in block {block} at index {index}: {value}")]
    NonFiniteGradient {
        block: &'static str,
        index: usize,
        value: f64,
    },
    #[error("training diverged in epoch {epoch} (loss trace {trace:?})")]
    Divergence { epoch: usize, trace: Vec<f64> },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    File(#[from] crate::tensorfile::TensorFileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Head,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Head => "head",
        }
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Hidden width of the perceptron; ignored by the head.
    pub hidden_size: usize,
}

impl TrainConfig {
    pub fn mlp() -> Self {
        Self {
            learning_rate: 5e-3,
            ..Self::head()
        }
    }

    pub fn head() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 5,
            seed: crate::DEFAULT_SEED,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            hidden_size: 256,
        }
    }

    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Mlp => Self::mlp(),
            ModelKind::Head => Self::head(),
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_size == 0 {
            return bad("epochs, batch_size and hidden_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// One training example: input, soft-label target, loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Features,
    pub target: Vec<f64>,
    pub weight: f64,
}

/// A trained (or initialized) classifier of either kind. Also used as the
/// gradient container, since gradients mirror the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Mlp(MlpParams),
    Head(HeadParams),
}

impl Classifier {
    pub fn init(kind: ModelKind, input_dim: usize, classes: usize, config: &TrainConfig) -> Self {
        match kind {
            ModelKind::Mlp => Self::Mlp(mlp_init(
                input_dim,
                config.hidden_size,
                classes,
                config.seed,
            )),
            ModelKind::Head => Self::Head(head_init(input_dim, classes)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Mlp(_) => ModelKind::Mlp,
            Self::Head(_) => ModelKind::Head,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Mlp(p) => p.w1.nrows(),
            Self::Head(p) => p.w.nrows(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Mlp(p) => p.b2.len(),
            Self::Head(p) => p.b.len(),
        }
    }

    /// Class probabilities for one input.
    pub fn predict(&self, x: &Features) -> Result<Vec<f64>, LearnError> {
        match self {
            Self::Mlp(p) => Ok(mlp_forward(p, x)?.probs),
            Self::Head(p) => p.forward(x),
        }
    }

    /// Weighted-mean gradient of the soft cross-entropy over a batch:
    /// `Σ ∇loss_s / Σ w_s`, all zeros when the weights sum to zero. Weight
    /// decay is not included; the optimizer applies it.
    pub fn gradients<'a, I>(&self, batch: I) -> Result<Classifier, LearnError>
    where
        I: IntoIterator<Item = &'a LabeledSample>,
    {
        match self {
            Self::Mlp(p) => Ok(Self::Mlp(mlp::gradients(p, batch)?)),
            Self::Head(p) => Ok(Self::Head(head::gradients(p, batch)?)),
        }
    }

    /// Weighted-mean loss over a batch, matching `gradients`.
    pub fn batch_loss<'a, I>(&self, batch: I) -> Result<f64, LearnError>
    where
        I: IntoIterator<Item = &'a LabeledSample>,
    {
        let mut total = 0.0;
        let mut weight = 0.0;
        let mut n = 0;
        for s in batch {
            let y = self.predict(&s.features)?;
            total += soft_cross_entropy(&y, &s.target, s.weight)?;
            weight += s.weight;
            n += 1;
        }
        if n == 0 {
            return Err(LearnError::EmptyBatch);
        }
        Ok(if weight > 0.0 { total / weight } else { 0.0 })
    }

    /// Parameter blocks in a fixed order, row-major.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            Self::Mlp(p) => vec![
                ("w1", p.w1.as_slice().unwrap()),
                ("b1", p.b1.as_slice().unwrap()),
                ("w2", p.w2.as_slice().unwrap()),
                ("b2", p.b2.as_slice().unwrap()),
            ],
            Self::Head(p) => vec![
                ("w", p.w.as_slice().unwrap()),
                ("b", p.b.as_slice().unwrap()),
            ],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            Self::Mlp(p) => vec![
                ("w1", p.w1.as_slice_mut().unwrap()),
                ("b1", p.b1.as_slice_mut().unwrap()),
                ("w2", p.w2.as_slice_mut().unwrap()),
                ("b2", p.b2.as_slice_mut().unwrap()),
            ],
            Self::Head(p) => vec![
                ("w", p.w.as_slice_mut().unwrap()),
                ("b", p.b.as_slice_mut().unwrap()),
            ],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

fn check_sample(expected_dim: usize, classes: usize, s: &LabeledSample) -> Result<(), LearnError> {
    if s.features.dimension() != expected_dim {
        return Err(LearnError::DimensionMismatch {
            expected: expected_dim,
            found: s.features.dimension(),
        });
    }
    if s.target.len() != classes {
        return Err(LearnError::ClassMismatch {
            expected: classes,
            found: s.target.len(),
        });
    }
    Ok(())
}
