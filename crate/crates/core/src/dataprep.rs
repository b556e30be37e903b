//! Routing data preparation: corpus ingestion, the expert prediction
//! dataset, temperature-softmax soft labels, stratified splitting and class
//! weighting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, embed, EmbedError, EmbeddingProvider};
use crate::expert::{ExpertAdaptor, ExpertRequest, ExpertSet, GenerationParams};
use crate::hash::derive_seed;

/// Temperature applied to similarity scores when building soft labels.
pub const DEFAULT_TEMPERATURE: f64 = 10.0;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate query id {0:?}")]
    DuplicateId(String),
    #[error("score {index} is not finite ({value})")]
    NonFiniteScore { index: usize, value: f64 },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("no scores given")]
    EmptyScores,
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("dataset {tag:?} has {count} record(s); at least 2 are needed to stratify")]
    TooFewRecords { tag: String, count: usize },
    #[error("class {0:?} has zero samples")]
    ZeroCount(String),
    #[error("no prediction records for query {0:?}")]
    NoRecords(String),
    #[error("no expert adaptors given")]
    NoAdaptors,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One instruction record with its reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub reference: String,
    pub dataset_tag: String,
}

/// On-disk corpus line.
#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    instruction: String,
    reference: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

/// Result of reading one corpus file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ingested {
    pub queries: Vec<Query>,
    pub skipped: Vec<SkippedLine>,
}

/// Read a JSON-lines corpus (`id`, `instruction`, `reference` per line).
/// Bad lines are skipped and reported with their 1-based line number; blank
/// lines are ignored.
pub fn ingest_dataset(path: &Path, dataset_tag: &str) -> Result<Ingested, DataError> {
    if dataset_tag.trim().is_empty() {
        return Err(DataError::InvalidRecord("dataset tag is empty".into()));
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Ingested::default();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let reason = match serde_json::from_str::<CorpusLine>(&line) {
            Err(e) => format!("unparseable record: {e}"),
            Ok(r) if r.id.trim().is_empty() => "empty id".into(),
            Ok(r) if r.instruction.trim().is_empty() => "empty instruction".into(),
            Ok(r) if !seen.insert(r.id.clone()) => format!("duplicate id {:?}", r.id),
            Ok(r) => {
                out.queries.push(Query {
                    id: r.id,
                    text: r.instruction,
                    reference: r.reference,
                    dataset_tag: dataset_tag.to_string(),
                });
                continue;
            }
        };
        tracing::warn!(path = %path.display(), line = line_no, %reason, "skipping corpus line");
        out.skipped.push(SkippedLine {
            line: line_no,
            reason,
        });
    }
    Ok(out)
}

/// Write queries in the corpus format read by [`ingest_dataset`].
pub fn write_corpus(path: &Path, queries: &[Query]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for q in queries {
        let line = serde_json::to_string(&CorpusLine {
            id: q.id.clone(),
            instruction: q.text.clone(),
            reference: q.reference.clone(),
        })
        .expect("plain strings serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Fail on query ids that repeat across corpora.
pub fn check_unique_ids(queries: &[Query]) -> Result<(), DataError> {
    let mut seen = BTreeSet::new();
    for q in queries {
        if !seen.insert(q.id.as_str()) {
            return Err(DataError::DuplicateId(q.id.clone()));
        }
    }
    Ok(())
}

/// One (query, expert) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub expert_name: String,
    pub nll: f64,
    pub bert_sim: f64,
    pub inference_seconds: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub response_text: String,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidRecord(m));
        if !(self.inference_seconds.is_finite() && self.inference_seconds > 0.0) {
            return bad(format!(
                "{}/{}: inference_seconds must be positive",
                self.query_id, self.expert_name
            ));
        }
        if !(-1.0..=1.0).contains(&self.bert_sim) {
            return bad(format!(
                "{}/{}: bert_sim outside [-1, 1]",
                self.query_id, self.expert_name
            ));
        }
        if !(self.nll.is_finite() && self.nll >= 0.0) {
            return bad(format!(
                "{}/{}: nll must be finite and >= 0",
                self.query_id, self.expert_name
            ));
        }
        Ok(())
    }

    /// Output tokens per second of wall-clock inference.
    pub fn throughput(&self) -> f64 {
        self.output_tokens as f64 / self.inference_seconds
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), DataError> {
    write_jsonl(path, records)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, DataError> {
    let records: Vec<PredictionRecord> = read_jsonl(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for item in items {
        let line =
            serde_json::to_string(item).map_err(|e| DataError::InvalidRecord(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertFailure {
    pub query_id: String,
    pub expert_name: String,
    pub message: String,
}

/// Output of the forward pass over every expert.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionDataset {
    /// Sorted by query id, then expert name.
    pub records: Vec<PredictionRecord>,
    pub failures: Vec<ExpertFailure>,
    /// Queries missing at least one expert's record; excluded downstream.
    pub incomplete: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub generation: GenerationParams,
    pub timeout: Duration,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            generation: GenerationParams::default(),
            timeout: Duration::from_secs(60),
        }
    }
}

/// Run every query through every expert and score the replies.
///
/// BERTSim is the cosine between the embedder's vectors for the reference
/// and the response. Calls run in parallel; output order is fixed.
pub fn build_prediction_dataset(
    queries: &[Query],
    adaptors: &[Arc<dyn ExpertAdaptor>],
    embedder: &dyn EmbeddingProvider,
    options: &BuildOptions,
) -> Result<PredictionDataset, DataError> {
    if adaptors.is_empty() {
        return Err(DataError::NoAdaptors);
    }
    let references: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|q| embed(&q.reference, embedder))
        .collect::<Result<_, _>>()?;

    let pairs: Vec<(usize, usize)> = (0..queries.len())
        .flat_map(|q| (0..adaptors.len()).map(move |a| (q, a)))
        .collect();

    let outcomes: Vec<Result<PredictionRecord, ExpertFailure>> = pairs
        .par_iter()
        .map(|&(qi, ai)| {
            let q = &queries[qi];
            let adaptor = &adaptors[ai];
            let fail = |message: String| ExpertFailure {
                query_id: q.id.clone(),
                expert_name: adaptor.name().to_string(),
                message,
            };
            let request = ExpertRequest {
                query_id: &q.id,
                prompt: &q.text,
                reference: Some(&q.reference),
                dataset_tag: Some(&q.dataset_tag),
                params: &options.generation,
                timeout: options.timeout,
            };
            let reply = adaptor.execute(&request).map_err(|e| fail(e.to_string()))?;
            reply.validate().map_err(&fail)?;
            let nll = reply
                .mean_nll()
                .ok_or_else(|| fail("reply carries no token log-probabilities".into()))?;
            let response =
                embed(&reply.response_text, embedder).map_err(|e| fail(e.to_string()))?;
            let sim = cosine(&references[qi], &response).map_err(|e| fail(e.to_string()))?;
            Ok(PredictionRecord {
                query_id: q.id.clone(),
                expert_name: adaptor.name().to_string(),
                nll,
                bert_sim: sim.value,
                inference_seconds: reply.elapsed_seconds,
                input_tokens: reply.input_tokens,
                output_tokens: reply.output_tokens,
                response_text: reply.response_text,
            })
        })
        .collect();

    let mut out = PredictionDataset::default();
    for outcome in outcomes {
        match outcome {
            Ok(r) => out.records.push(r),
            Err(f) => {
                tracing::warn!(query = %f.query_id, expert = %f.expert_name, message = %f.message, "expert call failed");
                out.incomplete.insert(f.query_id.clone());
                out.failures.push(f);
            }
        }
    }
    out.records
        .sort_by(|a, b| (&a.query_id, &a.expert_name).cmp(&(&b.query_id, &b.expert_name)));
    out.failures
        .sort_by(|a, b| (&a.query_id, &a.expert_name).cmp(&(&b.query_id, &b.expert_name)));
    Ok(out)
}

/// Records grouped per query id.
pub fn group_by_query(records: &[PredictionRecord]) -> BTreeMap<&str, Vec<&PredictionRecord>> {
    let mut groups: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.query_id.as_str()).or_default().push(r);
    }
    groups
}

/// `φ_i = exp(x_i / T) / Σ_j exp(x_j / T)`, computed with the maximum
/// subtracted first.
pub fn soft_labels(scores: &[f64], temperature: f64) -> Result<Vec<f64>, DataError> {
    if scores.is_empty() {
        return Err(DataError::EmptyScores);
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(DataError::NonPositiveTemperature(temperature));
    }
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(DataError::NonFiniteScore { index, value });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Which recorded metric drives the soft labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelMetric {
    #[default]
    BertSim,
    /// NLL negated, so that a lower NLL earns a higher probability.
    NegNll,
}

impl SoftLabelMetric {
    fn score(self, r: &PredictionRecord) -> f64 {
        match self {
            Self::BertSim => r.bert_sim,
            Self::NegNll => -r.nll,
        }
    }
}

/// Probability vector over the expert set for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelRow {
    pub query_id: String,
    pub probs: BTreeMap<String, f64>,
}

impl SoftLabelRow {
    /// Probabilities in expert-set order.
    pub fn vector(&self, experts: &ExpertSet) -> Vec<f64> {
        experts.names().iter().map(|e| self.probs[e]).collect()
    }
}

/// Soft labels for one query's complete record set. `None` when some expert
/// of the set has no record for it.
pub fn soft_label_row(
    query_id: &str,
    records: &[&PredictionRecord],
    experts: &ExpertSet,
    metric: SoftLabelMetric,
    temperature: f64,
) -> Result<Option<SoftLabelRow>, DataError> {
    let mut scores = Vec::with_capacity(experts.len());
    for name in experts.names() {
        match records.iter().find(|r| &r.expert_name == name) {
            Some(r) => scores.push(metric.score(r)),
            None => return Ok(None),
        }
    }
    let probs = soft_labels(&scores, temperature)?;
    Ok(Some(SoftLabelRow {
        query_id: query_id.to_string(),
        probs: experts.names().iter().cloned().zip(probs).collect(),
    }))
}

/// Expert with the highest BERTSim; ties go to the smallest name.
pub fn best_expert_label<'a>(records: &[&'a PredictionRecord]) -> Result<&'a str, DataError> {
    let mut best: Option<&PredictionRecord> = None;
    for r in records {
        best = match best {
            None => Some(r),
            Some(b)
                if r.bert_sim > b.bert_sim
                    || (r.bert_sim == b.bert_sim && r.expert_name < b.expert_name) =>
            {
                Some(r)
            }
            keep => keep,
        };
    }
    best.map(|r| r.expert_name.as_str())
        .ok_or_else(|| DataError::NoRecords(String::new()))
}

/// Train/test partition of queries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuerySplit {
    pub train: Vec<Query>,
    pub test: Vec<Query>,
}

/// Split each dataset tag independently: shuffle its records with a
/// generator derived from `(seed, tag)` and keep `round(fraction · n)` of
/// them (clamped to `[1, n − 1]`) for training. Both sides come back sorted
/// by query id.
pub fn stratified_split(
    queries: &[Query],
    train_fraction: f64,
    seed: u64,
) -> Result<QuerySplit, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    let mut by_tag: BTreeMap<&str, Vec<&Query>> = BTreeMap::new();
    for q in queries {
        by_tag.entry(q.dataset_tag.as_str()).or_default().push(q);
    }
    let mut split = QuerySplit::default();
    for (tag, mut members) in by_tag {
        let n = members.len();
        if n < 2 {
            return Err(DataError::TooFewRecords {
                tag: tag.to_string(),
                count: n,
            });
        }
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, tag)));
        let k = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        split
            .train
            .extend(members[..k].iter().map(|q| (*q).clone()));
        split.test.extend(members[k..].iter().map(|q| (*q).clone()));
    }
    split.train.sort_by(|a, b| a.id.cmp(&b.id));
    split.test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(split)
}

/// Per-class loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub per_class: BTreeMap<String, f64>,
}

/// Inverse-frequency class weights: `w_i = Σ_j |D_j| / |D_i|`, then
/// normalized to sum to one.
pub fn sample_weights(class_counts: &BTreeMap<String, usize>) -> Result<SampleWeights, DataError> {
    if class_counts.is_empty() {
        return Err(DataError::EmptyScores);
    }
    if let Some((name, _)) = class_counts.iter().find(|(_, c)| **c == 0) {
        return Err(DataError::ZeroCount(name.clone()));
    }
    let total: usize = class_counts.values().sum();
    let raw: BTreeMap<&String, f64> = class_counts
        .iter()
        .map(|(k, c)| (k, total as f64 / *c as f64))
        .collect();
    let raw_sum: f64 = raw.values().sum();
    Ok(SampleWeights {
        per_class: raw
            .into_iter()
            .map(|(k, w)| (k.clone(), w / raw_sum))
            .collect(),
    })
}

/// A training query with everything the classifier needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub query: Query,
    pub soft_label: SoftLabelRow,
    pub best_expert: String,
    pub weight: f64,
}

/// A held-out query with the records of every expert, sorted by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TestExample {
    pub query: Query,
    pub records: Vec<PredictionRecord>,
}

impl TestExample {
    pub fn record(&self, expert: &str) -> Option<&PredictionRecord> {
        self.records.iter().find(|r| r.expert_name == expert)
    }

    /// The expert with the best BERTSim on this query.
    pub fn best_expert(&self) -> &str {
        let refs: Vec<&PredictionRecord> = self.records.iter().collect();
        best_expert_label(&refs).expect("test examples are complete")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub experts: ExpertSet,
    pub train: Vec<TrainExample>,
    pub test: Vec<TestExample>,
    pub weights: SampleWeights,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssembleOptions {
    pub metric: SoftLabelMetric,
    pub temperature: f64,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self {
            metric: SoftLabelMetric::BertSim,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Attach soft labels, best-expert labels and class weights to a split.
/// Queries lacking a record for any expert are dropped from both sides.
pub fn assemble(
    split: &QuerySplit,
    records: &[PredictionRecord],
    experts: &ExpertSet,
    options: AssembleOptions,
) -> Result<SplitDataset, DataError> {
    let groups = group_by_query(records);
    let complete = |q: &Query| -> Option<&Vec<&PredictionRecord>> {
        let group = groups.get(q.id.as_str())?;
        experts
            .names()
            .iter()
            .all(|e| group.iter().any(|r| &r.expert_name == e))
            .then_some(group)
    };

    let mut staged = Vec::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for q in &split.train {
        let Some(group) = complete(q) else { continue };
        let in_set: Vec<&PredictionRecord> = group
            .iter()
            .copied()
            .filter(|r| experts.contains(&r.expert_name))
            .collect();
        let row = soft_label_row(&q.id, &in_set, experts, options.metric, options.temperature)?
            .expect("completeness checked");
        let best = best_expert_label(&in_set)?.to_string();
        *counts.entry(best.clone()).or_default() += 1;
        staged.push((q.clone(), row, best));
    }
    let weights = if counts.is_empty() {
        SampleWeights {
            per_class: BTreeMap::new(),
        }
    } else {
        sample_weights(&counts)?
    };
    let train = staged
        .into_iter()
        .map(|(query, soft_label, best_expert)| TrainExample {
            weight: weights.per_class[&best_expert],
            query,
            soft_label,
            best_expert,
        })
        .collect();

    let test = split
        .test
        .iter()
        .filter_map(|q| {
            let group = complete(q)?;
            let mut records: Vec<PredictionRecord> = group
                .iter()
                .filter(|r| experts.contains(&r.expert_name))
                .map(|r| (*r).clone())
                .collect();
            records.sort_by(|a, b| a.expert_name.cmp(&b.expert_name));
            Some(TestExample {
                query: q.clone(),
                records,
            })
        })
        .collect();

    Ok(SplitDataset {
        experts: experts.clone(),
        train,
        test,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(id: &str, tag: &str) -> Query {
        Query {
            id: id.into(),
            text: format!("text {id}"),
            reference: format!("ref {id}"),
            dataset_tag: tag.into(),
        }
    }

    fn rec(query: &str, expert: &str, sim: f64) -> PredictionRecord {
        PredictionRecord {
            query_id: query.into(),
            expert_name: expert.into(),
            nll: 1.0,
            bert_sim: sim,
            inference_seconds: 1.0,
            input_tokens: 1,
            output_tokens: 1,
            response_text: String::new(),
        }
    }

    #[test]
    fn uniform_scores_give_uniform_labels() {
        let p = soft_labels(&[0.5, 0.5, 0.5], 10.0).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn two_expert_case_matches_logistic_oracle() {
        // 1/(1+exp(-0.02)) in 40-digit decimal arithmetic
        let p = soft_labels(&[0.8, 0.6], 10.0).unwrap();
        assert!((p[0] - 0.504_999_833_339_999_7).abs() < 1e-14);
        assert!((p[1] - 0.495_000_166_660_000_3).abs() < 1e-14);
    }

    #[test]
    fn cold_temperature_is_nearly_one_hot() {
        let p = soft_labels(&[0.9, 0.1], 0.001).unwrap();
        assert!(p[0] > 0.999_999);
    }

    #[test]
    fn soft_label_errors() {
        assert!(matches!(
            soft_labels(&[1.0], 0.0),
            Err(DataError::NonPositiveTemperature(_))
        ));
        assert!(matches!(
            soft_labels(&[1.0], -1.0),
            Err(DataError::NonPositiveTemperature(_))
        ));
        assert!(matches!(
            soft_labels(&[1.0, f64::NAN], 1.0),
            Err(DataError::NonFiniteScore { index: 1, .. })
        ));
        assert!(matches!(soft_labels(&[], 1.0), Err(DataError::EmptyScores)));
    }

    #[test]
    fn sample_weight_examples() {
        let counts: BTreeMap<String, usize> = [("a", 10), ("b", 30), ("c", 60)]
            .map(|(k, v)| (k.to_string(), v))
            .into();
        let w = sample_weights(&counts).unwrap().per_class;
        // raw = (10, 10/3, 5/3), sum 15
        assert!((w["a"] - 10.0 / 15.0).abs() < 1e-12);
        assert!((w["b"] - (10.0 / 3.0) / 15.0).abs() < 1e-12);
        assert!((w["c"] - (5.0 / 3.0) / 15.0).abs() < 1e-12);
        assert!((w["a"] - 0.66667).abs() < 1e-5);

        let even: BTreeMap<String, usize> = [("a".to_string(), 5), ("b".to_string(), 5)].into();
        assert_eq!(sample_weights(&even).unwrap().per_class["a"], 0.5);
        let single: BTreeMap<String, usize> = [("a".to_string(), 7)].into();
        assert_eq!(sample_weights(&single).unwrap().per_class["a"], 1.0);
        let zero: BTreeMap<String, usize> = [("a".to_string(), 0)].into();
        assert!(matches!(
            sample_weights(&zero),
            Err(DataError::ZeroCount(_))
        ));
    }

    #[test]
    fn best_expert_examples() {
        let (a, b, c) = (rec("q", "a", 0.7), rec("q", "b", 0.9), rec("q", "c", 0.8));
        assert_eq!(best_expert_label(&[&a, &b, &c]).unwrap(), "b");
        let (a, b) = (rec("q", "a", 0.9), rec("q", "b", 0.9));
        assert_eq!(best_expert_label(&[&b, &a]).unwrap(), "a");
        let c = rec("q", "c", 0.2);
        assert_eq!(best_expert_label(&[&c]).unwrap(), "c");
        assert!(best_expert_label(&[]).is_err());
    }

    #[test]
    fn split_single_tag() {
        let qs: Vec<Query> = (0..10).map(|i| q(&format!("q{i}"), "t")).collect();
        let s = stratified_split(&qs, 0.8, 42).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
    }

    #[test]
    fn split_is_per_tag() {
        let qs: Vec<Query> = (0..20)
            .map(|i| q(&format!("q{i:02}"), if i % 2 == 0 { "a" } else { "b" }))
            .collect();
        let s = stratified_split(&qs, 0.8, 42).unwrap();
        for tag in ["a", "b"] {
            assert_eq!(s.train.iter().filter(|q| q.dataset_tag == tag).count(), 8);
            assert_eq!(s.test.iter().filter(|q| q.dataset_tag == tag).count(), 2);
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let qs: Vec<Query> = (0..37)
            .map(|i| q(&format!("q{i}"), ["x", "y", "z"][i % 3]))
            .collect();
        let a = stratified_split(&qs, 0.8, 42).unwrap();
        assert_eq!(a, stratified_split(&qs, 0.8, 42).unwrap());
        assert_ne!(a, stratified_split(&qs, 0.8, 7).unwrap());
        let train: BTreeSet<_> = a.train.iter().map(|q| &q.id).collect();
        assert!(a.test.iter().all(|q| !train.contains(&q.id)));
        assert_eq!(a.train.len() + a.test.len(), 37);
    }

    #[test]
    fn split_errors() {
        let qs = vec![q("a", "t"), q("b", "t"), q("c", "lonely")];
        assert!(matches!(
            stratified_split(&qs, 0.8, 1),
            Err(DataError::TooFewRecords { count: 1, .. })
        ));
        assert!(matches!(
            stratified_split(&qs, 1.0, 1),
            Err(DataError::InvalidFraction(_))
        ));
    }

    #[test]
    fn assemble_drops_incomplete_and_weights_by_best_class() {
        let experts = ExpertSet::new(["a", "b"]).unwrap();
        let split = QuerySplit {
            train: vec![q("q1", "t"), q("q2", "t"), q("q3", "t"), q("q4", "t")],
            test: vec![q("q5", "t")],
        };
        let records = vec![
            rec("q1", "a", 0.9),
            rec("q1", "b", 0.1),
            rec("q2", "a", 0.8),
            rec("q2", "b", 0.2),
            rec("q3", "a", 0.1),
            rec("q3", "b", 0.7),
            rec("q4", "a", 0.5),
            rec("q5", "a", 0.5),
            rec("q5", "b", 0.6),
        ];
        let ds = assemble(&split, &records, &experts, AssembleOptions::default()).unwrap();
        assert_eq!(ds.train.len(), 3);
        // two "a" wins, one "b": raw (3/2, 3), normalized (1/3, 2/3)
        assert!((ds.weights.per_class["a"] - 1.0 / 3.0).abs() < 1e-12);
        assert!((ds.train[2].weight - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.test[0].best_expert(), "b");
        let row = &ds.train[0].soft_label;
        assert!((row.probs.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn neg_nll_metric_prefers_lower_nll() {
        let experts = ExpertSet::new(["a", "b"]).unwrap();
        let mut a = rec("q", "a", 0.5);
        a.nll = 1.0;
        let mut b = rec("q", "b", 0.5);
        b.nll = 3.0;
        let row = soft_label_row("q", &[&a, &b], &experts, SoftLabelMetric::NegNll, 1.0)
            .unwrap()
            .unwrap();
        assert!(row.probs["a"] > row.probs["b"]);
    }

    #[test]
    fn ingest_reports_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"1","instruction":"What is 2+2?","reference":"4"}"#,
                "\n",
                "not json\n",
                r#"{"id":"2","instruction":"Name a prime.","reference":"7"}"#,
                "\n",
                r#"{"id":"3","instruction":"Spell cat.","reference":"c a t"}"#,
                "\n",
            ),
        )
        .unwrap();
        let got = ingest_dataset(&path, "gsm8k").unwrap();
        assert_eq!(got.queries.len(), 3);
        assert_eq!(got.skipped.len(), 1);
        assert_eq!(got.skipped[0].line, 2);
        assert_eq!(
            got.queries
                .iter()
                .map(|q| q.id.as_str())
                .collect::<Vec<_>>(),
            ["1", "2", "3"]
        );
        assert!(got.queries.iter().all(|q| q.dataset_tag == "gsm8k"));
    }

    #[test]
    fn ingest_empty_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert_eq!(ingest_dataset(&path, "t").unwrap(), Ingested::default());
        assert!(matches!(
            ingest_dataset(&dir.path().join("nope.jsonl"), "t"),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn corpus_and_predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.jsonl");
        let qs = vec![q("a", "arc"), q("b", "arc")];
        write_corpus(&corpus, &qs).unwrap();
        assert_eq!(ingest_dataset(&corpus, "arc").unwrap().queries, qs);

        let preds = dir.path().join("p.jsonl");
        let mut r = rec("a", "x", 0.123456789012345);
        r.nll = 2.0 / 3.0;
        r.inference_seconds = 0.1 + 0.2;
        write_predictions(&preds, std::slice::from_ref(&r)).unwrap();
        assert_eq!(read_predictions(&preds).unwrap(), vec![r]);
    }

    #[test]
    fn duplicate_ids_across_corpora() {
        assert!(check_unique_ids(&[q("a", "x"), q("b", "y")]).is_ok());
        assert!(matches!(
            check_unique_ids(&[q("a", "x"), q("a", "y")]),
            Err(DataError::DuplicateId(_))
        ));
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 1..10)
    }

    proptest! {
        #[test]
        fn soft_labels_sum_to_one_and_keep_argmax(x in scores(), t in 0.05f64..50.0) {
            let p = soft_labels(&x, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let arg = |v: &[f64]| crate::expert::argmax(v);
            prop_assert_eq!(arg(&p), arg(&x));
        }

        #[test]
        fn soft_labels_shift_invariant(x in scores(), c in -100.0f64..100.0, t in 0.1f64..20.0) {
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            for (a, b) in soft_labels(&x, t).unwrap().iter().zip(soft_labels(&shifted, t).unwrap()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn weights_are_inverse_to_counts(counts in prop::collection::vec(1usize..500, 1..8)) {
            let map: BTreeMap<String, usize> =
                counts.iter().enumerate().map(|(i, c)| (format!("e{i}"), *c)).collect();
            let w = sample_weights(&map).unwrap().per_class;
            prop_assert!((w.values().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (a, ca) in &map {
                for (b, cb) in &map {
                    if ca < cb {
                        prop_assert!(w[a] > w[b]);
                    }
                }
            }
        }
    }
}
