//! The prepare → train → evaluate chain over in-memory data.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataprep::{
    self, assemble, build_prediction_dataset, check_unique_ids, stratified_split, AssembleOptions,
    BuildOptions, DataError, PredictionDataset, PredictionRecord, Query, QuerySplit,
    SoftLabelMetric, SplitDataset,
};
use crate::embed::{
    fit_vectorizer, EmbedError, EmbeddingProvider, Features, ProviderConfig, VectorizerSettings,
};
use crate::eval::{
    self, breakdown, optimal_bounds, oracle_decisions, outcomes, query_counts, random_protocol,
    summarize, zero_router, EvalError, EvalReport, PricingTable, ReportRow, RowKind,
};
use crate::expert::{ExpertAdaptor, ExpertSet};
use crate::learn::{train_classifier, LabeledSample, LearnError, ModelKind, TrainConfig};
use crate::routers::{
    build_knn, KnnRouter, LearnedRouter, Method, RandomRouter, Router, RouterError,
    RoutingDecision, VectorSource,
};
use crate::simx::{build_fleet, SimError, SimExpertConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Invalid(String),
}

/// Every knob of a run, with the standard hyperparameters as defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub seed: u64,
    pub temperature: f64,
    pub train_fraction: f64,
    pub soft_label_metric: SoftLabelMetric,
    pub trials: usize,
    pub vectorizer: VectorizerSettings,
    pub embedding: ProviderConfig,
    pub mlp: TrainConfig,
    pub head: TrainConfig,
    pub timeout_seconds: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            seed: crate::DEFAULT_SEED,
            temperature: dataprep::DEFAULT_TEMPERATURE,
            train_fraction: dataprep::DEFAULT_TRAIN_FRACTION,
            soft_label_metric: SoftLabelMetric::BertSim,
            trials: 10,
            vectorizer: VectorizerSettings::default(),
            embedding: ProviderConfig::default(),
            mlp: TrainConfig::mlp(),
            head: TrainConfig::head(),
            timeout_seconds: 60.0,
        }
    }
}

impl PipelineSettings {
    /// Apply one seed to every stochastic step.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.mlp.seed = seed;
        self.head.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(PipelineError::Invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.trials == 0 {
            return Err(PipelineError::Invalid("trials must be at least 1".into()));
        }
        if !(self.timeout_seconds > 0.0) {
            return Err(PipelineError::Invalid("timeout must be positive".into()));
        }
        self.mlp.validate()?;
        self.head.validate()?;
        Ok(())
    }
}

/// Output of the preparation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub predictions: PredictionDataset,
    pub split: QuerySplit,
    pub dataset: SplitDataset,
}

/// Query every expert, score the replies, split and attach labels.
pub fn prepare(
    queries: &[Query],
    adaptors: &[Arc<dyn ExpertAdaptor>],
    embedder: &dyn EmbeddingProvider,
    settings: &PipelineSettings,
) -> Result<Prepared, PipelineError> {
    settings.validate()?;
    check_unique_ids(queries)?;
    let experts = ExpertSet::new(adaptors.iter().map(|a| a.name().to_string()))
        .map_err(PipelineError::Invalid)?;
    let options = BuildOptions {
        timeout: std::time::Duration::from_secs_f64(settings.timeout_seconds),
        ..BuildOptions::default()
    };
    let predictions = build_prediction_dataset(queries, adaptors, embedder, &options)?;
    let split = stratified_split(queries, settings.train_fraction, settings.seed)?;
    let dataset = split_from_records(&split, &predictions.records, &experts, settings)?;
    Ok(Prepared {
        predictions,
        split,
        dataset,
    })
}

pub fn split_from_records(
    split: &QuerySplit,
    records: &[PredictionRecord],
    experts: &ExpertSet,
    settings: &PipelineSettings,
) -> Result<SplitDataset, PipelineError> {
    Ok(assemble(
        split,
        records,
        experts,
        AssembleOptions {
            metric: settings.soft_label_metric,
            temperature: settings.temperature,
        },
    )?)
}

/// A router plus how its training went.
pub struct Trained {
    pub router: Router,
    pub loss_trace: Vec<f64>,
}

/// Build the router for `method` from the training side of `dataset`.
pub fn train_router(
    method: Method,
    dataset: &SplitDataset,
    settings: &PipelineSettings,
) -> Result<Trained, PipelineError> {
    let experts = dataset.experts.clone();
    if dataset.train.is_empty() {
        return Err(LearnError::EmptyTrainingSet.into());
    }
    let (router, loss_trace) = match method {
        Method::Random => (
            Router::Random(RandomRouter::new(experts, settings.seed)),
            Vec::new(),
        ),
        Method::Knn => {
            let provider = settings.embedding.build()?;
            let rows: Vec<(String, String, String)> = dataset
                .train
                .iter()
                .map(|t| {
                    (
                        t.query.id.clone(),
                        t.query.text.clone(),
                        t.best_expert.clone(),
                    )
                })
                .collect();
            let index = build_knn(&rows, provider.as_ref())?;
            (
                Router::Knn(KnnRouter::new(experts, index, settings.embedding.clone())?),
                Vec::new(),
            )
        }
        Method::Mlp | Method::Head => {
            let (kind, config, source) = if method == Method::Mlp {
                let texts: Vec<&str> = dataset
                    .train
                    .iter()
                    .map(|t| t.query.text.as_str())
                    .collect();
                let vectorizer = fit_vectorizer(&texts, settings.vectorizer)?;
                (
                    ModelKind::Mlp,
                    &settings.mlp,
                    VectorSource::Vectorizer(vectorizer),
                )
            } else {
                (
                    ModelKind::Head,
                    &settings.head,
                    VectorSource::embedding(settings.embedding.clone())?,
                )
            };
            let features: Vec<Features> = dataset
                .train
                .par_iter()
                .map(|t| source.features(&t.query.text))
                .collect::<Result<_, _>>()?;
            let samples: Vec<LabeledSample> = dataset
                .train
                .iter()
                .zip(features)
                .map(|(t, features)| LabeledSample {
                    features,
                    target: t.soft_label.vector(&experts),
                    weight: t.weight,
                })
                .collect();
            let outcome = train_classifier(&samples, kind, experts.len(), config)?;
            let router = LearnedRouter::new(experts, outcome.classifier, config.clone(), source)?;
            (Router::Learned(router), outcome.loss_trace)
        }
    };
    Ok(Trained { router, loss_trace })
}

/// Result of evaluating a set of routers on the test side.
pub struct Evaluation {
    pub report: EvalReport,
    /// Routed decisions per method, in test order. The random router is
    /// represented by its first trial.
    pub decisions: BTreeMap<Method, Vec<RoutingDecision>>,
}

/// Row name of the per-query best-expert oracle.
pub const ORACLE_ROW: &str = "oracle";
pub const OPTIMAL_ROW: &str = "optimal";
pub const ZERO_ROUTER_ROW: &str = "zero-router";

/// Score every expert and router on the test split.
///
/// Rows: one per expert, one per router, then `zero-router` (mean of the
/// expert rows), `oracle` (each query sent to its best expert) and
/// `optimal` (best value per column over experts and routers).
pub fn evaluate(
    routers: &[&Router],
    dataset: &SplitDataset,
    pricing: &PricingTable,
    settings: &PipelineSettings,
) -> Result<Evaluation, PipelineError> {
    let test = &dataset.test;
    let experts = &dataset.experts;
    if test.is_empty() {
        return Err(EvalError::Empty.into());
    }
    let mut rows = Vec::new();
    let mut breakdowns = BTreeMap::new();
    let mut counts_input: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    let mut accuracy = BTreeMap::new();
    let mut decisions = BTreeMap::new();

    for name in experts.names() {
        let records: Vec<&PredictionRecord> = test.iter().filter_map(|t| t.record(name)).collect();
        rows.push(ReportRow {
            name: name.clone(),
            kind: RowKind::Expert,
            metrics: summarize(&records, pricing)?.metrics,
        });
        breakdowns.insert(name.clone(), breakdown(test, &records));
    }
    let expert_metrics: Vec<_> = rows.iter().map(|r| r.metrics).collect();

    let oracle = oracle_decisions(test);
    let score_accuracy = |chosen: &BTreeMap<String, String>| {
        let hits = test
            .iter()
            .filter(|t| chosen.get(&t.query.id).map(String::as_str) == Some(t.best_expert()))
            .count();
        hits as f64 / test.len() as f64
    };

    for router in routers {
        let method = router.method();
        let name = method.as_str().to_string();
        let (metrics, tag_means, chosen, routed) = if method == Method::Random {
            let out = random_protocol(test, experts, settings.trials, settings.seed, pricing)?;
            let first = out.trials[0].clone();
            let routed = test
                .iter()
                .map(|t| RoutingDecision {
                    query_id: t.query.id.clone(),
                    chosen_expert: first[&t.query.id].clone(),
                    scores: experts
                        .names()
                        .iter()
                        .map(|e| (e.clone(), 1.0 / experts.len() as f64))
                        .collect(),
                    method,
                    decision_seconds: f64::MIN_POSITIVE,
                })
                .collect();
            (out.metrics, out.breakdown, first, routed)
        } else {
            let routed: Vec<RoutingDecision> = test
                .par_iter()
                .map(|t| router.route(&t.query.id, &t.query.text))
                .collect::<Result<_, _>>()?;
            let chosen: BTreeMap<String, String> = routed
                .iter()
                .map(|d| (d.query_id.clone(), d.chosen_expert.clone()))
                .collect();
            let records = outcomes(&name, test, &chosen)?;
            (
                summarize(&records, pricing)?.metrics,
                breakdown(test, &records),
                chosen,
                routed,
            )
        };
        rows.push(ReportRow {
            name: name.clone(),
            kind: RowKind::Router,
            metrics,
        });
        breakdowns.insert(name.clone(), tag_means);
        accuracy.insert(name.clone(), score_accuracy(&chosen));
        counts_input.insert(name.clone(), chosen.into_iter().collect());
        decisions.insert(method, routed);
    }

    let ranked: Vec<_> = rows.iter().map(|r| r.metrics).collect();
    let oracle_records = outcomes(ORACLE_ROW, test, &oracle)?;
    let oracle_summary = summarize(&oracle_records, pricing)?;
    rows.push(ReportRow {
        name: ZERO_ROUTER_ROW.into(),
        kind: RowKind::Baseline,
        metrics: zero_router(&expert_metrics)?,
    });
    rows.push(ReportRow {
        name: ORACLE_ROW.into(),
        kind: RowKind::Baseline,
        metrics: oracle_summary.metrics,
    });
    rows.push(ReportRow {
        name: OPTIMAL_ROW.into(),
        kind: RowKind::Baseline,
        metrics: optimal_bounds(&ranked)?,
    });
    breakdowns.insert(ORACLE_ROW.into(), eval::optimal_breakdown(test));
    counts_input.insert(ORACLE_ROW.into(), oracle.into_iter().collect());

    Ok(Evaluation {
        report: EvalReport {
            experts: experts.clone(),
            test_queries: test.len(),
            rows,
            breakdowns,
            counts: query_counts(&counts_input, experts)?,
            accuracy,
        },
        decisions,
    })
}

/// Reference pricing with every simulated expert bound to its family.
pub fn fleet_pricing(fleet: &[SimExpertConfig]) -> Result<PricingTable, PipelineError> {
    let mut table = PricingTable::reference();
    for c in fleet {
        table = table.with_expert(&c.name, &c.pricing_family)?;
    }
    Ok(table)
}

/// Adaptors for a simulated fleet, in fleet order.
pub fn fleet_adaptors(
    fleet: &[SimExpertConfig],
) -> Result<Vec<Arc<dyn ExpertAdaptor>>, PipelineError> {
    Ok(build_fleet(fleet.to_vec())?
        .into_iter()
        .map(|(_, a)| a as Arc<dyn ExpertAdaptor>)
        .collect())
}
