use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Classifier, HeadParams, LearnError, MlpParams, ModelKind, TrainConfig};
use crate::tensorfile::{self, BlockSpec};
use ndarray::{Array1, Array2};

const FORMAT: &str = "xroute-classifier";
const VERSION: u32 = 1;

/// Header of a serialized classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHeader {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: Option<usize>,
    pub classes: usize,
    pub seed: u64,
    pub config: TrainConfig,
}

pub fn save_classifier(
    out: impl Write,
    classifier: &Classifier,
    config: &TrainConfig,
) -> Result<(), LearnError> {
    let header = ClassifierHeader {
        kind: classifier.kind(),
        input_dim: classifier.input_dim(),
        hidden: match classifier {
            Classifier::Mlp(p) => Some(p.hidden()),
            Classifier::Head(_) => None,
        },
        classes: classifier.classes(),
        seed: config.seed,
        config: config.clone(),
    };
    let shapes: Vec<Vec<usize>> = match classifier {
        Classifier::Mlp(p) => vec![
            p.w1.shape().to_vec(),
            p.b1.shape().to_vec(),
            p.w2.shape().to_vec(),
            p.b2.shape().to_vec(),
        ],
        Classifier::Head(p) => vec![p.w.shape().to_vec(), p.b.shape().to_vec()],
    };
    let blocks: Vec<(BlockSpec, &[f64])> = classifier
        .blocks()
        .into_iter()
        .zip(shapes)
        .map(|((name, data), shape)| {
            (
                BlockSpec {
                    name: name.to_string(),
                    shape,
                },
                data,
            )
        })
        .collect();
    tensorfile::write(out, FORMAT, VERSION, &header, &blocks)?;
    Ok(())
}

pub fn load_classifier(input: impl Read) -> Result<(Classifier, ClassifierHeader), LearnError> {
    let (header, mut blocks): (ClassifierHeader, _) = tensorfile::read(input, FORMAT, VERSION)?;
    let (n, e) = (header.input_dim, header.classes);
    let matrix = |rows: usize, cols: usize, data: Vec<f64>| {
        Array2::from_shape_vec((rows, cols), data).expect("shape checked by take_block")
    };
    let classifier = match header.kind {
        ModelKind::Mlp => {
            let m = header
                .hidden
                .ok_or_else(|| LearnError::Config("mlp header lacks hidden size".into()))?;
            Classifier::Mlp(MlpParams {
                w1: matrix(n, m, tensorfile::take_block(&mut blocks, "w1", &[n, m])?),
                b1: Array1::from(tensorfile::take_block(&mut blocks, "b1", &[m])?),
                w2: matrix(m, e, tensorfile::take_block(&mut blocks, "w2", &[m, e])?),
                b2: Array1::from(tensorfile::take_block(&mut blocks, "b2", &[e])?),
            })
        }
        ModelKind::Head => Classifier::Head(HeadParams {
            w: matrix(n, e, tensorfile::take_block(&mut blocks, "w", &[n, e])?),
            b: Array1::from(tensorfile::take_block(&mut blocks, "b", &[e])?),
        }),
    };
    Ok((classifier, header))
}
