use ndarray::{Array1, Array2};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_sample, softmax, LabeledSample, LearnError};
use crate::embed::Features;

/// Two-layer perceptron: `y = softmax(W2ᵀ relu(W1ᵀ x + b1) + b2)`.
///
/// `w1` is input × hidden and `w2` is hidden × classes, so row `i` of `w1`
/// holds the fan-out of input feature `i`. Sparse inputs only touch the rows
/// of their non-zero features.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    pub fn zeros(inputs: usize, hidden: usize, classes: usize) -> Self {
        Self {
            w1: Array2::zeros((inputs, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, classes)),
            b2: Array1::zeros(classes),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }
}

pub(super) fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Glorot-uniform weights, zero biases, seeded.
pub fn mlp_init(inputs: usize, hidden: usize, classes: usize, seed: u64) -> MlpParams {
    assert!(
        inputs > 0 && hidden > 0 && classes > 0,
        "layer sizes must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = glorot(inputs, hidden, &mut rng);
    let w2 = glorot(hidden, classes, &mut rng);
    MlpParams {
        w1,
        b1: Array1::zeros(hidden),
        w2,
        b2: Array1::zeros(classes),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpForward {
    pub pre_activation: Array1<f64>,
    pub hidden: Array1<f64>,
    pub probs: Vec<f64>,
}

pub fn mlp_forward(params: &MlpParams, x: &Features) -> Result<MlpForward, LearnError> {
    if x.dimension() != params.w1.nrows() {
        return Err(LearnError::DimensionMismatch {
            expected: params.w1.nrows(),
            found: x.dimension(),
        });
    }
    let mut z1 = params.b1.clone();
    x.for_each_nonzero(|i, v| z1.scaled_add(v, &params.w1.row(i)));
    let hidden = z1.mapv(|z| z.max(0.0));
    let z2 = hidden.dot(&params.w2) + &params.b2;
    let probs = softmax(z2.as_slice().unwrap());
    Ok(MlpForward {
        pre_activation: z1,
        hidden,
        probs,
    })
}

pub(super) fn gradients<'a, I>(params: &MlpParams, batch: I) -> Result<MlpParams, LearnError>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    let classes = params.b2.len();
    let mut g = MlpParams::zeros(params.w1.nrows(), params.hidden(), classes);
    let mut weight_sum = 0.0;
    let mut n = 0;
    for s in batch {
        check_sample(params.w1.nrows(), classes, s)?;
        n += 1;
        weight_sum += s.weight;
        if s.weight == 0.0 {
            continue;
        }
        let fwd = mlp_forward(params, &s.features)?;
        let target_mass: f64 = s.target.iter().sum();
        let dz2 = Array1::from_iter(
            fwd.probs
                .iter()
                .zip(&s.target)
                .map(|(y, t)| s.weight * (y * target_mass - t)),
        );
        for (j, &h) in fwd.hidden.iter().enumerate() {
            if h > 0.0 {
                g.w2.row_mut(j).scaled_add(h, &dz2);
            }
        }
        g.b2 += &dz2;
        let dh = params.w2.dot(&dz2);
        let dz1 = Array1::from_iter(dh.iter().zip(&fwd.pre_activation).map(|(d, z)| {
            if *z > 0.0 {
                *d
            } else {
                0.0
            }
        }));
        s.features
            .for_each_nonzero(|i, v| g.w1.row_mut(i).scaled_add(v, &dz1));
        g.b1 += &dz1;
    }
    if n == 0 {
        return Err(LearnError::EmptyBatch);
    }
    if weight_sum > 0.0 {
        let scale = 1.0 / weight_sum;
        g.w1 *= scale;
        g.b1 *= scale;
        g.w2 *= scale;
        g.b2 *= scale;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::SparseVector;
    use proptest::prelude::*;

    /// Straightforward triple-loop forward pass.
    fn naive_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let (n, m) = p.w1.dim();
        let e = p.b2.len();
        let mut h = vec![0.0; m];
        for j in 0..m {
            let mut acc = p.b1[j];
            for i in 0..n {
                acc += p.w1[[i, j]] * x[i];
            }
            h[j] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut z = vec![0.0; e];
        for k in 0..e {
            let mut acc = p.b2[k];
            for j in 0..m {
                acc += p.w2[[j, k]] * h[j];
            }
            z[k] = acc;
        }
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let denom: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        z.iter().map(|v| (v - zmax).exp() / denom).collect()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = mlp_init(20, 16, 3, 7);
        let b = mlp_init(20, 16, 3, 7);
        assert_eq!(a, b);
        assert!(a.b1.iter().chain(a.b2.iter()).all(|v| *v == 0.0));
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(a.w1.iter().all(|w| w.abs() <= bound));
        assert_ne!(a, mlp_init(20, 16, 3, 8));
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let p = MlpParams::zeros(4, 3, 5);
        let y = mlp_forward(&p, &Features::Dense(vec![1.0, -2.0, 3.0, 0.5]))
            .unwrap()
            .probs;
        assert!(y.iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn dead_hidden_layer_leaves_bias_only() {
        let mut p = mlp_init(3, 4, 2, 1);
        p.w1.fill(1.0);
        p.b1.fill(-100.0);
        p.b2 = Array1::from(vec![0.0, 2.0f64.ln()]);
        let fwd = mlp_forward(&p, &Features::Dense(vec![1.0, 1.0, 1.0])).unwrap();
        assert!(fwd.hidden.iter().all(|h| *h == 0.0));
        assert!((fwd.probs[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((fwd.probs[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_input_dimension() {
        let p = MlpParams::zeros(4, 3, 2);
        assert!(matches!(
            mlp_forward(&p, &Features::Dense(vec![1.0])),
            Err(LearnError::DimensionMismatch {
                expected: 4,
                found: 1
            })
        ));
    }

    #[test]
    fn sparse_and_dense_inputs_agree() {
        let p = mlp_init(6, 5, 3, 3);
        let sparse = SparseVector::from_entries(6, vec![(1, 2.0), (4, -1.0)]);
        let a = mlp_forward(&p, &Features::Dense(sparse.to_dense())).unwrap();
        let b = mlp_forward(&p, &Features::Sparse(sparse)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn forward_matches_naive_oracle(seed in 0u64..1000, x in prop::collection::vec(-3.0f64..3.0, 7)) {
            let mut p = mlp_init(7, 9, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
            let d = Uniform::new(-0.5, 0.5).unwrap();
            p.b1.mapv_inplace(|_| d.sample(&mut rng));
            p.b2.mapv_inplace(|_| d.sample(&mut rng));
            let y = mlp_forward(&p, &Features::Dense(x.clone())).unwrap().probs;
            let oracle = naive_forward(&p, &x);
            for (a, b) in y.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn output_bias_shift_leaves_probabilities(seed in 0u64..1000, c in -50.0f64..50.0) {
            let p = mlp_init(5, 4, 3, seed);
            let mut shifted = p.clone();
            shifted.b2 += c;
            let x = Features::Dense(vec![0.3, -1.0, 2.0, 0.0, 1.5]);
            let a = mlp_forward(&p, &x).unwrap().probs;
            let b = mlp_forward(&shifted, &x).unwrap().probs;
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-9);
            }
        }
    }
}
