use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use xroute_core::dataprep::{
    ingest_dataset, read_jsonl, read_predictions, write_corpus, write_jsonl, write_predictions,
    Query, QuerySplit, SplitDataset,
};
use xroute_core::eval::{emit_report, EvalReport, PricingTable, ReportFormat};
use xroute_core::expert::{ExpertAdaptor, ExpertSet};
use xroute_core::pipeline::{self, fleet_adaptors, fleet_pricing};
use xroute_core::routers::{load_router, save_router, Method, Router};
use xroute_core::simx::{
    canonical_fleet, fleet_to_toml, load_sim_fleet, synthetic_corpus, SimExpertConfig,
};
use xroute_gateway::{
    endpoints_from_config, pricing_from_config, AdaptorKind, ExpertEndpointConfig, FleetSource,
    Gateway, GatewayConfig, Locality,
};

use crate::config::RunConfig;
use crate::error::CliError;

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::data("cli", format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    body.push('\n');
    write_file(path, &body)
}

/// Where each artifact lives below the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn data(&self, file: &str) -> PathBuf {
        self.root.join("data").join(file)
    }

    pub fn router(&self, method: Method) -> PathBuf {
        self.root.join("routers").join(method.as_str())
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// The experts a run talks to, with their prices.
struct Experts {
    adaptors: Vec<Arc<dyn ExpertAdaptor>>,
    pricing: PricingTable,
    /// Present when the experts are simulated.
    fleet: Option<Vec<SimExpertConfig>>,
}

fn sim_fleet(config: &RunConfig) -> Result<Vec<SimExpertConfig>, CliError> {
    match &config.fleet {
        Some(path) => Ok(load_sim_fleet(path)?.into_iter().map(|(c, _)| c).collect()),
        None => Ok(canonical_fleet(config.pipeline.seed)),
    }
}

fn experts(config: &RunConfig) -> Result<Experts, CliError> {
    if let Some(path) = &config.experts {
        let gateway = GatewayConfig::load(path)?;
        let adaptors = endpoints_from_config(&gateway)?
            .into_iter()
            .map(|e| e.adaptor)
            .collect();
        return Ok(Experts {
            adaptors,
            pricing: pricing_from_config(&gateway)?,
            fleet: None,
        });
    }
    let fleet = sim_fleet(config)?;
    Ok(Experts {
        adaptors: fleet_adaptors(&fleet)?,
        pricing: fleet_pricing(&fleet)?,
        fleet: Some(fleet),
    })
}

fn load_corpora(config: &RunConfig) -> Result<Vec<Query>, CliError> {
    if config.corpora.is_empty() {
        let mix: Vec<(&str, usize)> = config.mix.iter().map(|(t, n)| (t.as_str(), *n)).collect();
        tracing::info!(?mix, "no corpora configured; using the synthetic corpus");
        return Ok(synthetic_corpus(&mix, config.pipeline.seed));
    }
    let mut queries = Vec::new();
    for corpus in &config.corpora {
        let ingested = ingest_dataset(&corpus.path, &corpus.tag)?;
        for s in &ingested.skipped {
            tracing::warn!(path = %corpus.path.display(), line = s.line, reason = %s.reason, "skipped corpus line");
        }
        queries.extend(ingested.queries);
    }
    Ok(queries)
}

/// Query every expert, then write predictions, split and labels.
pub fn prepare(config: &RunConfig) -> Result<(), CliError> {
    let queries = load_corpora(config)?;
    prepare_queries(config, &queries)
}

fn prepare_queries(config: &RunConfig, queries: &[Query]) -> Result<(), CliError> {
    let experts = experts(config)?;
    let embedder = config
        .pipeline
        .embedding
        .build()
        .map_err(|e| CliError::data("embed", e.to_string()))?;
    let prepared = pipeline::prepare(
        queries,
        &experts.adaptors,
        embedder.as_ref(),
        &config.pipeline,
    )?;

    let layout = Layout::new(&config.out);
    create_dir(&layout.root.join("data"))?;
    write_corpus(&layout.data("corpus.jsonl"), queries)?;
    write_predictions(
        &layout.data("predictions.jsonl"),
        &prepared.predictions.records,
    )?;
    write_jsonl(
        &layout.data("failures.jsonl"),
        &prepared.predictions.failures,
    )?;
    write_jsonl(&layout.data("train.jsonl"), &prepared.split.train)?;
    write_jsonl(&layout.data("test.jsonl"), &prepared.split.test)?;
    let labels: Vec<_> = prepared
        .dataset
        .train
        .iter()
        .map(|t| &t.soft_label)
        .collect();
    write_jsonl(&layout.data("soft_labels.jsonl"), &labels)?;
    write_json(&layout.data("weights.json"), &prepared.dataset.weights)?;
    write_json(&layout.data("experts.json"), &prepared.dataset.experts)?;
    if let Some(fleet) = &experts.fleet {
        write_file(&layout.root.join("fleet.toml"), &fleet_to_toml(fleet))?;
    }
    println!(
        "prepared {} queries x {} experts ({} failed calls); {} train / {} test -> {}",
        queries.len(),
        experts.adaptors.len(),
        prepared.predictions.failures.len(),
        prepared.dataset.train.len(),
        prepared.dataset.test.len(),
        layout.root.join("data").display()
    );
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<SplitDataset, CliError> {
    let layout = Layout::new(&config.out);
    let experts_path = layout.data("experts.json");
    let text = std::fs::read_to_string(&experts_path).map_err(|e| io_error(&experts_path, e))?;
    let experts: ExpertSet = serde_json::from_str(&text).map_err(|e| io_error(&experts_path, e))?;
    let records = read_predictions(&layout.data("predictions.jsonl"))?;
    let split = QuerySplit {
        train: read_jsonl(&layout.data("train.jsonl"))?,
        test: read_jsonl(&layout.data("test.jsonl"))?,
    };
    Ok(pipeline::split_from_records(
        &split,
        &records,
        &experts,
        &config.pipeline,
    )?)
}

/// Fit and save one router per selected method.
pub fn train(config: &RunConfig) -> Result<(), CliError> {
    let dataset = load_dataset(config)?;
    train_dataset(config, &dataset)
}

fn train_dataset(config: &RunConfig, dataset: &SplitDataset) -> Result<(), CliError> {
    let layout = Layout::new(&config.out);
    for &method in &config.methods {
        let trained = pipeline::train_router(method, dataset, &config.pipeline)?;
        let dir = layout.router(method);
        save_router(&dir, &trained.router)?;
        write_json(&dir.join("loss_trace.json"), &trained.loss_trace)?;
        match trained.loss_trace.last() {
            Some(loss) => println!(
                "trained {method}: final loss {loss:.6} -> {}",
                dir.display()
            ),
            None => println!("trained {method} -> {}", dir.display()),
        }
    }
    Ok(())
}

/// Score the saved routers on the test split and write the reports.
pub fn evaluate(config: &RunConfig) -> Result<EvalReport, CliError> {
    let dataset = load_dataset(config)?;
    let experts = experts(config)?;
    evaluate_dataset(config, &dataset, &experts.pricing)
}

fn evaluate_dataset(
    config: &RunConfig,
    dataset: &SplitDataset,
    pricing: &PricingTable,
) -> Result<EvalReport, CliError> {
    let layout = Layout::new(&config.out);
    let routers: Vec<Router> = config
        .methods
        .iter()
        .map(|m| load_router(&layout.router(*m)))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Router> = routers.iter().collect();
    let evaluation = pipeline::evaluate(&refs, dataset, pricing, &config.pipeline)?;
    let report = evaluation.report;
    for format in [ReportFormat::Structured, ReportFormat::Tabular] {
        emit_report(&report, &layout.reports(), format)?;
    }
    print!("{}", report.table_csv());
    Ok(report)
}

/// Prepare, train and evaluate on a synthetic corpus against the simulated
/// fleet.
pub fn simulate(config: &RunConfig) -> Result<EvalReport, CliError> {
    if config.experts.is_some() {
        return Err(CliError::config(
            "simulate runs against a simulated fleet; drop `experts`",
        ));
    }
    let mix: Vec<(&str, usize)> = config.mix.iter().map(|(t, n)| (t.as_str(), *n)).collect();
    let queries = synthetic_corpus(&mix, config.pipeline.seed);
    prepare_queries(config, &queries)?;
    let dataset = load_dataset(config)?;
    train_dataset(config, &dataset)?;
    let pricing = experts(config)?.pricing;
    evaluate_dataset(config, &dataset, &pricing)
}

/// The gateway config `serve` runs with. An explicit gateway file wins;
/// otherwise the trained routers are served against the run's experts.
pub fn gateway_config(config: &RunConfig, bind: Option<&str>) -> Result<GatewayConfig, CliError> {
    let layout = Layout::new(&config.out);
    let default_routers = || config.methods.iter().map(|m| layout.router(*m)).collect();
    let mut gateway = if let Some(path) = &config.gateway {
        GatewayConfig::load(path)?
    } else if let Some(path) = &config.experts {
        let mut g = GatewayConfig::load(path)?;
        g.routers = Vec::new();
        g
    } else {
        let fleet = sim_fleet(config)?;
        GatewayConfig {
            routers: Vec::new(),
            bind: "127.0.0.1:8080".into(),
            timeout_seconds: config.pipeline.timeout_seconds,
            fallback: Default::default(),
            locality: Default::default(),
            fleet: FleetSource {
                path: config.fleet.clone(),
                seed: config.pipeline.seed,
            },
            pricing: None,
            experts: fleet
                .iter()
                .map(|c| ExpertEndpointConfig {
                    name: c.name.clone(),
                    kind: AdaptorKind::Simulated,
                    locality: Locality::Cloud,
                    template: xroute_gateway::PLACEHOLDER.into(),
                    generation: Default::default(),
                    pricing_family: c.pricing_family.clone(),
                    remote: None,
                })
                .collect(),
        }
    };
    if gateway.routers.is_empty() {
        gateway.routers = default_routers();
    }
    if let Some(bind) = bind {
        gateway.bind = bind.to_string();
    }
    gateway.validate()?;
    Ok(gateway)
}

/// Run the gateway until interrupted.
pub fn serve(config: &RunConfig, bind: Option<&str>) -> Result<(), CliError> {
    let gateway_config = gateway_config(config, bind)?;
    for r in &gateway_config.routers {
        if !r.exists() {
            return Err(CliError::config(format!(
                "router directory {} does not exist; run `train` first",
                r.display()
            )));
        }
    }
    let gateway = Gateway::from_config(&gateway_config)?;
    xroute_gateway::serve(Arc::new(gateway), &gateway_config.bind, |addr| {
        println!("listening on {addr}");
    })?;
    Ok(())
}
