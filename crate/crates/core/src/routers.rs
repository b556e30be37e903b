//! Routing decision functions: random, nearest neighbor and the two learned
//! classifiers, behind one [`Router`] type.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{
    cosine, embed, EmbedError, EmbeddingProvider, Features, ProviderConfig, VectorizerModel,
};
use crate::expert::{argmax, ExpertSet};
use crate::learn::{
    load_classifier, save_classifier, Classifier, LearnError, ModelKind, TrainConfig,
};
use crate::tensorfile::{self, BlockSpec, TensorFileError};

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("nearest-neighbor index is empty")]
    EmptyIndex,
    #[error("label {0:?} is not in the expert set")]
    UnknownLabel(String),
    #[error("model has {found} classes for {expected} experts")]
    ClassMismatch { expected: usize, found: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    File(#[from] TensorFileError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RouterError + '_ {
    move |source| RouterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Random,
    Knn,
    Mlp,
    Head,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Random, Method::Knn, Method::Mlp, Method::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Knn => "knn",
            Self::Mlp => "mlp",
            Self::Head => "head",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown routing method {s:?}"))
    }
}

/// One routing outcome. `scores` are keyed by expert name, so iteration
/// follows the expert-set order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub query_id: String,
    pub chosen_expert: String,
    pub scores: BTreeMap<String, f64>,
    pub method: Method,
    pub decision_seconds: f64,
}

impl RoutingDecision {
    /// Whether `chosen_expert` is the first maximum of `scores`.
    pub fn is_self_consistent(&self) -> bool {
        let values: Vec<f64> = self.scores.values().copied().collect();
        self.scores.keys().nth(argmax(&values)) == Some(&self.chosen_expert)
    }
}

fn elapsed_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64().max(1e-9)
}

fn decision_from_scores(
    query_id: &str,
    experts: &ExpertSet,
    scores: Vec<f64>,
    method: Method,
    start: Instant,
) -> RoutingDecision {
    let chosen = experts.name(argmax(&scores)).to_string();
    RoutingDecision {
        query_id: query_id.to_string(),
        chosen_expert: chosen,
        scores: experts.names().iter().cloned().zip(scores).collect(),
        method,
        decision_seconds: elapsed_since(start),
    }
}

/// Uniform choice with uniform `1/E` scores.
pub fn route_random(query_id: &str, experts: &ExpertSet, rng: &mut impl Rng) -> RoutingDecision {
    let start = Instant::now();
    let e = experts.len();
    let pick = rng.random_range(0..e);
    RoutingDecision {
        query_id: query_id.to_string(),
        chosen_expert: experts.name(pick).to_string(),
        scores: experts
            .names()
            .iter()
            .map(|n| (n.clone(), 1.0 / e as f64))
            .collect(),
        method: Method::Random,
        decision_seconds: elapsed_since(start),
    }
}

/// Random router owning its generator.
#[derive(Debug)]
pub struct RandomRouter {
    experts: ExpertSet,
    seed: u64,
    rng: Mutex<ChaCha8Rng>,
}

impl RandomRouter {
    pub fn new(experts: ExpertSet, seed: u64) -> Self {
        Self {
            experts,
            seed,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn route(&self, query_id: &str) -> RoutingDecision {
        let mut rng = self.rng.lock().expect("random router lock");
        route_random(query_id, &self.experts, &mut *rng)
    }
}

/// Training-query embeddings with the best expert of each query, kept in
/// ascending query-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    query_ids: Vec<String>,
    labels: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct KnnHeader {
    query_ids: Vec<String>,
    labels: Vec<String>,
    dimension: usize,
}

/// Result of a nearest-neighbor lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub position: usize,
    pub similarity: f64,
    pub degenerate: bool,
}

impl KnnIndex {
    pub fn from_parts(entries: Vec<(String, String, Vec<f64>)>) -> Result<Self, RouterError> {
        let mut entries = entries;
        if entries.is_empty() {
            return Err(RouterError::EmptyIndex);
        }
        let dim = entries[0].2.len();
        if let Some(bad) = entries.iter().find(|e| e.2.len() != dim) {
            return Err(EmbedError::DimensionMismatch {
                left: dim,
                right: bad.2.len(),
            }
            .into());
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut index = Self {
            query_ids: Vec::with_capacity(entries.len()),
            labels: Vec::with_capacity(entries.len()),
            embeddings: Vec::with_capacity(entries.len()),
        };
        for (id, label, v) in entries {
            index.query_ids.push(id);
            index.labels.push(label);
            index.embeddings.push(v);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.query_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn query_id(&self, i: usize) -> &str {
        &self.query_ids[i]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i]
    }

    /// Exhaustive scan for the maximal cosine similarity. The first entry
    /// wins ties, which is the smallest query id. A zero-norm query is
    /// flagged and resolved to entry 0.
    pub fn nearest(&self, query: &[f64]) -> Result<Neighbor, RouterError> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in self.embeddings.iter().enumerate() {
            let c = cosine(query, v)?;
            if c.degenerate {
                continue;
            }
            if best.is_none_or(|(_, s)| c.value > s) {
                best = Some((i, c.value));
            }
        }
        Ok(match best {
            Some((position, similarity)) => Neighbor {
                position,
                similarity,
                degenerate: false,
            },
            None => Neighbor {
                position: 0,
                similarity: 0.0,
                degenerate: true,
            },
        })
    }

    pub fn save(&self, out: impl Write) -> Result<(), RouterError> {
        let header = KnnHeader {
            query_ids: self.query_ids.clone(),
            labels: self.labels.clone(),
            dimension: self.dimension(),
        };
        let flat: Vec<f64> = self.embeddings.iter().flatten().copied().collect();
        tensorfile::write(
            out,
            "xroute-knn",
            1,
            &header,
            &[(
                BlockSpec {
                    name: "embeddings".into(),
                    shape: vec![self.len(), self.dimension()],
                },
                &flat,
            )],
        )?;
        Ok(())
    }

    pub fn load(input: impl std::io::Read) -> Result<Self, RouterError> {
        let (header, mut blocks): (KnnHeader, _) = tensorfile::read(input, "xroute-knn", 1)?;
        let n = header.query_ids.len();
        if header.labels.len() != n || n == 0 || header.dimension == 0 {
            return Err(RouterError::Manifest(
                "inconsistent nearest-neighbor header".into(),
            ));
        }
        let flat = tensorfile::take_block(&mut blocks, "embeddings", &[n, header.dimension])?;
        Ok(Self {
            query_ids: header.query_ids,
            labels: header.labels,
            embeddings: flat.chunks(header.dimension).map(<[f64]>::to_vec).collect(),
        })
    }
}

/// Embed every training query. `train` holds (query id, text, best expert).
pub fn build_knn(
    train: &[(String, String, String)],
    provider: &dyn EmbeddingProvider,
) -> Result<KnnIndex, RouterError> {
    if train.is_empty() {
        return Err(RouterError::EmptyIndex);
    }
    let entries = train
        .iter()
        .map(|(id, text, label)| Ok((id.clone(), label.clone(), embed(text, provider)?)))
        .collect::<Result<Vec<_>, RouterError>>()?;
    KnnIndex::from_parts(entries)
}

pub struct KnnRouter {
    experts: ExpertSet,
    index: KnnIndex,
    provider_config: ProviderConfig,
    provider: Arc<dyn EmbeddingProvider>,
}

impl KnnRouter {
    pub fn new(
        experts: ExpertSet,
        index: KnnIndex,
        provider_config: ProviderConfig,
    ) -> Result<Self, RouterError> {
        if let Some(bad) = index.labels.iter().find(|l| !experts.contains(l)) {
            return Err(RouterError::UnknownLabel(bad.clone()));
        }
        let provider = provider_config.build()?;
        if provider.dimension() != index.dimension() {
            return Err(EmbedError::DimensionMismatch {
                left: provider.dimension(),
                right: index.dimension(),
            }
            .into());
        }
        Ok(Self {
            experts,
            index,
            provider_config,
            provider,
        })
    }

    pub fn index(&self) -> &KnnIndex {
        &self.index
    }

    /// The neighbor's label is the decision. Scores hold, per expert, the
    /// best similarity among that expert's entries (-1 when it has none);
    /// a degenerate query gets a one-hot score on the fallback label.
    pub fn route(&self, query_id: &str, text: &str) -> Result<RoutingDecision, RouterError> {
        let start = Instant::now();
        let q = embed(text, self.provider.as_ref())?;
        let nn = self.index.nearest(&q)?;
        let chosen = self.index.label(nn.position).to_string();
        let scores: BTreeMap<String, f64> = if nn.degenerate {
            tracing::warn!(
                query = query_id,
                "zero-norm query embedding; using first index entry"
            );
            self.experts
                .names()
                .iter()
                .map(|e| (e.clone(), if *e == chosen { 1.0 } else { 0.0 }))
                .collect()
        } else {
            let mut best: BTreeMap<String, f64> = self
                .experts
                .names()
                .iter()
                .map(|e| (e.clone(), -1.0))
                .collect();
            for (v, label) in self.index.embeddings.iter().zip(&self.index.labels) {
                let c = cosine(&q, v)?;
                let slot = best.get_mut(label).expect("labels checked at construction");
                if c.value > *slot {
                    *slot = c.value;
                }
            }
            best
        };
        Ok(RoutingDecision {
            query_id: query_id.to_string(),
            chosen_expert: chosen,
            scores,
            method: Method::Knn,
            decision_seconds: elapsed_since(start),
        })
    }
}

/// Where a learned router gets its input vectors.
pub enum VectorSource {
    Vectorizer(VectorizerModel),
    Embedding {
        config: ProviderConfig,
        provider: Arc<dyn EmbeddingProvider>,
    },
}

impl VectorSource {
    pub fn embedding(config: ProviderConfig) -> Result<Self, RouterError> {
        let provider = config.build()?;
        Ok(Self::Embedding { config, provider })
    }

    pub fn features(&self, text: &str) -> Result<Features, RouterError> {
        Ok(match self {
            Self::Vectorizer(v) => Features::Sparse(v.vectorize(text)),
            Self::Embedding { provider, .. } => Features::Dense(embed(text, provider.as_ref())?),
        })
    }

    pub fn dimension(&self) -> usize {
        match self {
            Self::Vectorizer(v) => v.dimension(),
            Self::Embedding { provider, .. } => provider.dimension(),
        }
    }
}

pub struct LearnedRouter {
    experts: ExpertSet,
    classifier: Classifier,
    config: TrainConfig,
    source: VectorSource,
}

impl LearnedRouter {
    pub fn new(
        experts: ExpertSet,
        classifier: Classifier,
        config: TrainConfig,
        source: VectorSource,
    ) -> Result<Self, RouterError> {
        if classifier.classes() != experts.len() {
            return Err(RouterError::ClassMismatch {
                expected: experts.len(),
                found: classifier.classes(),
            });
        }
        if classifier.input_dim() != source.dimension() {
            return Err(LearnError::DimensionMismatch {
                expected: classifier.input_dim(),
                found: source.dimension(),
            }
            .into());
        }
        Ok(Self {
            experts,
            classifier,
            config,
            source,
        })
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn source(&self) -> &VectorSource {
        &self.source
    }

    pub fn route(&self, query_id: &str, text: &str) -> Result<RoutingDecision, RouterError> {
        let start = Instant::now();
        let x = self.source.features(text)?;
        let probs = self.classifier.predict(&x)?;
        let method = match self.classifier.kind() {
            ModelKind::Mlp => Method::Mlp,
            ModelKind::Head => Method::Head,
        };
        Ok(decision_from_scores(
            query_id,
            &self.experts,
            probs,
            method,
            start,
        ))
    }
}

/// Any router.
pub enum Router {
    Random(RandomRouter),
    Knn(KnnRouter),
    Learned(LearnedRouter),
}

impl Router {
    pub fn method(&self) -> Method {
        match self {
            Self::Random(_) => Method::Random,
            Self::Knn(_) => Method::Knn,
            Self::Learned(l) => match l.classifier.kind() {
                ModelKind::Mlp => Method::Mlp,
                ModelKind::Head => Method::Head,
            },
        }
    }

    pub fn experts(&self) -> &ExpertSet {
        match self {
            Self::Random(r) => &r.experts,
            Self::Knn(k) => &k.experts,
            Self::Learned(l) => &l.experts,
        }
    }

    pub fn route(&self, query_id: &str, text: &str) -> Result<RoutingDecision, RouterError> {
        match self {
            Self::Random(r) => Ok(r.route(query_id)),
            Self::Knn(k) => k.route(query_id, text),
            Self::Learned(l) => l.route(query_id, text),
        }
    }
}

const MANIFEST: &str = "router.json";
const MODEL_FILE: &str = "model.bin";
const KNN_FILE: &str = "knn.bin";
const VECTORIZER_FILE: &str = "vectorizer.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VectorSourceSpec {
    None,
    Vectorizer { file: String },
    Embedding { provider: ProviderConfig },
}

/// Small JSON document naming everything needed to rebuild a router.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterManifest {
    pub method: Method,
    pub experts: ExpertSet,
    pub vector_source: VectorSourceSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Write a router into `dir` (created if missing).
pub fn save_router(dir: &Path, router: &Router) -> Result<RouterManifest, RouterError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let create = |name: &str| -> Result<BufWriter<File>, RouterError> {
        let path = dir.join(name);
        Ok(BufWriter::new(File::create(&path).map_err(io_err(&path))?))
    };
    let manifest = match router {
        Router::Random(r) => RouterManifest {
            method: Method::Random,
            experts: r.experts.clone(),
            vector_source: VectorSourceSpec::None,
            model_file: None,
            index_file: None,
            seed: Some(r.seed),
        },
        Router::Knn(k) => {
            let mut w = create(KNN_FILE)?;
            k.index.save(&mut w)?;
            w.flush().map_err(io_err(&dir.join(KNN_FILE)))?;
            RouterManifest {
                method: Method::Knn,
                experts: k.experts.clone(),
                vector_source: VectorSourceSpec::Embedding {
                    provider: k.provider_config.clone(),
                },
                model_file: None,
                index_file: Some(KNN_FILE.into()),
                seed: None,
            }
        }
        Router::Learned(l) => {
            let mut w = create(MODEL_FILE)?;
            save_classifier(&mut w, &l.classifier, &l.config)?;
            w.flush().map_err(io_err(&dir.join(MODEL_FILE)))?;
            let vector_source = match &l.source {
                VectorSource::Vectorizer(v) => {
                    let mut w = create(VECTORIZER_FILE)?;
                    v.write_to(&mut w)?;
                    w.flush().map_err(io_err(&dir.join(VECTORIZER_FILE)))?;
                    VectorSourceSpec::Vectorizer {
                        file: VECTORIZER_FILE.into(),
                    }
                }
                VectorSource::Embedding { config, .. } => VectorSourceSpec::Embedding {
                    provider: config.clone(),
                },
            };
            RouterManifest {
                method: router.method(),
                experts: l.experts.clone(),
                vector_source,
                model_file: Some(MODEL_FILE.into()),
                index_file: None,
                seed: Some(l.config.seed),
            }
        }
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| RouterError::Manifest(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<RouterManifest, RouterError> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text)
        .map_err(|e| RouterError::Manifest(format!("{}: {e}", path.display())))
}

/// Rebuild the router saved in `dir`.
pub fn load_router(dir: &Path) -> Result<Router, RouterError> {
    let manifest = read_manifest(dir)?;
    let open = |name: &Option<String>| -> Result<BufReader<File>, RouterError> {
        let name = name.as_ref().ok_or_else(|| {
            RouterError::Manifest(format!("{} router needs a file entry", manifest.method))
        })?;
        let path = dir.join(name);
        Ok(BufReader::new(File::open(&path).map_err(io_err(&path))?))
    };
    let experts = manifest.experts.clone();
    Ok(match manifest.method {
        Method::Random => Router::Random(RandomRouter::new(
            experts,
            manifest.seed.unwrap_or(crate::DEFAULT_SEED),
        )),
        Method::Knn => {
            let VectorSourceSpec::Embedding { provider } = &manifest.vector_source else {
                return Err(RouterError::Manifest(
                    "knn router needs an embedding source".into(),
                ));
            };
            let index = KnnIndex::load(open(&manifest.index_file)?)?;
            Router::Knn(KnnRouter::new(experts, index, provider.clone())?)
        }
        Method::Mlp | Method::Head => {
            let (classifier, header) = load_classifier(open(&manifest.model_file)?)?;
            let source = match &manifest.vector_source {
                VectorSourceSpec::Vectorizer { file } => VectorSource::Vectorizer(
                    VectorizerModel::read_from(open(&Some(file.clone()))?)?,
                ),
                VectorSourceSpec::Embedding { provider } => {
                    VectorSource::embedding(provider.clone())?
                }
                VectorSourceSpec::None => {
                    return Err(RouterError::Manifest(
                        "learned router needs a vector source".into(),
                    ))
                }
            };
            Router::Learned(LearnedRouter::new(
                experts,
                classifier,
                header.config,
                source,
            )?)
        }
    })
}
