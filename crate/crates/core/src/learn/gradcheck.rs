use super::{Classifier, LabeledSample, LearnError};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub block: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compare `gradients` against `(L(θ+ε) − L(θ−ε)) / 2ε` on every
/// coordinate. Relative error is `|g − n| / max(|g|, |n|, floor)`.
pub fn gradient_check(
    model: &Classifier,
    batch: &[LabeledSample],
    epsilon: f64,
    floor: f64,
) -> Result<GradientCheck, LearnError> {
    let analytic = model.gradients(batch)?;
    let mut probe = model.clone();
    let mut worst = GradientCheck {
        max_relative_error: 0.0,
        block: "",
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (b, (name, grad)) in analytic.blocks().into_iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let original = probe.blocks()[b].1[i];
            probe.blocks_mut()[b].1[i] = original + epsilon;
            let up = probe.batch_loss(batch)?;
            probe.blocks_mut()[b].1[i] = original - epsilon;
            let down = probe.batch_loss(batch)?;
            probe.blocks_mut()[b].1[i] = original;

            let numeric = (up - down) / (2.0 * epsilon);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(floor);
            worst.coordinates += 1;
            if rel > worst.max_relative_error || worst.block.is_empty() {
                worst = GradientCheck {
                    max_relative_error: rel,
                    block: name,
                    index: i,
                    analytic: g,
                    numeric,
                    coordinates: worst.coordinates,
                };
            }
        }
    }
    Ok(worst)
}
