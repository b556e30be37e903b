//! Text to vectors: tokenization, bag-of-words / TF-IDF vectorizers,
//! embedding providers and cosine similarity.

mod provider;
mod similarity;
mod tokenize;
mod vectorizer;

use thiserror::Error;

pub use provider::{
    embed, EmbeddingProvider, HttpProvider, ProviderConfig, ProviderKind, StubProvider,
    DEFAULT_STUB_DIMENSION,
};
pub use similarity::{cosine, Cosine};
pub use tokenize::tokenize;
pub use vectorizer::{
    fit_vectorizer, vectorize, VectorizerKind, VectorizerModel, VectorizerSettings, Vocabulary,
    DEFAULT_MAX_VOCABULARY,
};

use std::time::Duration;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot fit a vectorizer on an empty corpus")]
    EmptyCorpus,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding provider {provider} failed after {attempts} attempt(s): {message}")]
    Provider {
        provider: String,
        message: String,
        attempts: u32,
        retryable: bool,
        retry_after: Option<Duration>,
    },
    #[error("malformed vectorizer file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    dimension: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    /// Build from unordered entries; duplicate indices are summed and zeros
    /// dropped.
    pub fn from_entries(dimension: usize, mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by_key(|&(i, _)| i);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (i, v) in entries {
            assert!(i < dimension, "index {i} outside dimension {dimension}");
            match merged.last_mut() {
                Some((j, acc)) if *j == i => *acc += v,
                _ => merged.push((i, v)),
            }
        }
        merged.retain(|&(_, v)| v != 0.0);
        Self {
            dimension,
            entries: merged,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    /// True when no in-vocabulary token contributed.
    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.dimension];
        for &(i, v) in &self.entries {
            dense[i] = v;
        }
        dense
    }
}

pub type DenseVector = Vec<f64>;

/// Model input, either a sparse vectorizer output or a dense embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Sparse(SparseVector),
    Dense(DenseVector),
}

impl Features {
    pub fn dimension(&self) -> usize {
        match self {
            Self::Sparse(s) => s.dimension(),
            Self::Dense(d) => d.len(),
        }
    }

    /// Visit every stored (index, value) pair in index order.
    pub fn for_each_nonzero(&self, mut f: impl FnMut(usize, f64)) {
        match self {
            Self::Sparse(s) => s.entries().iter().for_each(|&(i, v)| f(i, v)),
            Self::Dense(d) => d
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .for_each(|(i, &v)| f(i, v)),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        match self {
            Self::Sparse(s) => s.to_dense(),
            Self::Dense(d) => d.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_merges_and_sorts() {
        let v = SparseVector::from_entries(5, vec![(3, 1.0), (1, 2.0), (3, 1.0), (4, 0.0)]);
        assert_eq!(v.entries(), &[(1, 2.0), (3, 2.0)]);
        assert_eq!(v.to_dense(), vec![0.0, 2.0, 0.0, 2.0, 0.0]);
        assert!(!v.is_zero());
    }

    #[test]
    fn features_visit_nonzeros() {
        let mut seen = vec![];
        Features::Dense(vec![0.0, 1.5, 0.0, -2.0]).for_each_nonzero(|i, v| seen.push((i, v)));
        assert_eq!(seen, vec![(1, 1.5), (3, -2.0)]);
    }
}
