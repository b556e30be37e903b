use ndarray::{Array1, Array2};

use super::{check_sample, softmax, LabeledSample, LearnError};
use crate::embed::Features;

/// Linear softmax head over a frozen sentence embedding:
/// `y = softmax(Wᵀ h + b)` with `w` of shape embedding × classes.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            w: Array2::zeros((dim, classes)),
            b: Array1::zeros(classes),
        }
    }

    fn logits(&self, x: &Features) -> Result<Array1<f64>, LearnError> {
        if x.dimension() != self.w.nrows() {
            return Err(LearnError::DimensionMismatch {
                expected: self.w.nrows(),
                found: x.dimension(),
            });
        }
        let mut z = self.b.clone();
        x.for_each_nonzero(|i, v| z.scaled_add(v, &self.w.row(i)));
        Ok(z)
    }

    pub fn forward(&self, x: &Features) -> Result<Vec<f64>, LearnError> {
        Ok(softmax(self.logits(x)?.as_slice().unwrap()))
    }
}

/// A head starts at zero: uniform output, and a convex loss in `W, b`.
pub fn head_init(dim: usize, classes: usize) -> HeadParams {
    assert!(dim > 0 && classes > 0, "head sizes must be positive");
    HeadParams::zeros(dim, classes)
}

pub(super) fn gradients<'a, I>(params: &HeadParams, batch: I) -> Result<HeadParams, LearnError>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    let (dim, classes) = params.w.dim();
    let mut g = HeadParams::zeros(dim, classes);
    let mut weight_sum = 0.0;
    let mut n = 0;
    for s in batch {
        check_sample(dim, classes, s)?;
        n += 1;
        weight_sum += s.weight;
        if s.weight == 0.0 {
            continue;
        }
        let y = params.forward(&s.features)?;
        let target_mass: f64 = s.target.iter().sum();
        let dz = Array1::from_iter(
            y.iter()
                .zip(&s.target)
                .map(|(p, t)| s.weight * (p * target_mass - t)),
        );
        s.features
            .for_each_nonzero(|i, v| g.w.row_mut(i).scaled_add(v, &dz));
        g.b += &dz;
    }
    if n == 0 {
        return Err(LearnError::EmptyBatch);
    }
    if weight_sum > 0.0 {
        g.w /= weight_sum;
        g.b /= weight_sum;
    }
    Ok(g)
}
