//! Cost, throughput and quality metrics, the no-routing and oracle
//! baselines, the repeated random protocol, query counts and report output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataprep::{PredictionRecord, TestExample};
use crate::expert::ExpertSet;
use crate::routers::route_random;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to summarize")]
    Empty,
    #[error("unknown pricing family {0:?}")]
    UnknownFamily(String),
    #[error("expert {0:?} has no pricing family")]
    UnpricedExpert(String),
    #[error("record {query_id}/{expert}: inference_seconds must be positive")]
    NonPositiveTime { query_id: String, expert: String },
    #[error("negative price for family {0:?}")]
    NegativePrice(String),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("method {method:?} has two decisions for query {query_id:?}")]
    DuplicateDecision { method: String, query_id: String },
    #[error("method {method:?} has no decision for query {query_id:?}")]
    MissingDecision { method: String, query_id: String },
    #[error("query {query_id:?} has no record for expert {expert:?}")]
    MissingRecord { query_id: String, expert: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Price per million tokens in micro-dollars, which is picodollars per
/// token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingEntry {
    pub family: String,
    pub input_micro_usd_per_million: u64,
    pub output_micro_usd_per_million: u64,
}

/// Whole picodollars (1e-12 USD).
pub type Picodollars = u64;

pub const PICO_PER_USD: f64 = 1e12;

pub fn pico_to_usd(pico: Picodollars) -> f64 {
    pico as f64 / PICO_PER_USD
}

impl PricingEntry {
    /// Build from dollars per million tokens, rounded to whole micro-dollars.
    pub fn from_usd(family: &str, input: f64, output: f64) -> Result<Self, EvalError> {
        if !(input >= 0.0 && output >= 0.0) {
            return Err(EvalError::NegativePrice(family.to_string()));
        }
        Ok(Self {
            family: family.to_string(),
            input_micro_usd_per_million: (input * 1e6).round() as u64,
            output_micro_usd_per_million: (output * 1e6).round() as u64,
        })
    }
}

/// `C = T_i / 1e6 · c_i + T_o / 1e6 · c_o`, exact in picodollars.
pub fn query_cost(input_tokens: u64, output_tokens: u64, pricing: &PricingEntry) -> Picodollars {
    input_tokens * pricing.input_micro_usd_per_million
        + output_tokens * pricing.output_micro_usd_per_million
}

/// Dollar prices per million tokens as written in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsdPrice {
    pub input: f64,
    pub output: f64,
}

/// Family prices plus the family of each expert.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PricingTable {
    families: BTreeMap<String, PricingEntry>,
    expert_family: BTreeMap<String, String>,
}

impl PricingTable {
    pub fn new(families: &BTreeMap<String, UsdPrice>) -> Result<Self, EvalError> {
        let families = families
            .iter()
            .map(|(f, p)| Ok((f.clone(), PricingEntry::from_usd(f, p.input, p.output)?)))
            .collect::<Result<_, EvalError>>()?;
        Ok(Self {
            families,
            expert_family: BTreeMap::new(),
        })
    }

    /// Reference list prices for the five model families.
    pub fn reference() -> Self {
        let rows = [
            ("deepseek", 0.14, 0.28),
            ("fox", 0.20, 0.20),
            ("llama", 0.20, 0.20),
            ("mistral", 0.25, 0.25),
            ("qwen", 0.20, 0.20),
        ];
        let families = rows
            .iter()
            .map(|(f, i, o)| {
                (
                    f.to_string(),
                    UsdPrice {
                        input: *i,
                        output: *o,
                    },
                )
            })
            .collect();
        Self::new(&families).expect("reference prices are non-negative")
    }

    pub fn with_expert(mut self, expert: &str, family: &str) -> Result<Self, EvalError> {
        if !self.families.contains_key(family) {
            return Err(EvalError::UnknownFamily(family.to_string()));
        }
        self.expert_family
            .insert(expert.to_string(), family.to_string());
        Ok(self)
    }

    pub fn family(&self, family: &str) -> Result<&PricingEntry, EvalError> {
        self.families
            .get(family)
            .ok_or_else(|| EvalError::UnknownFamily(family.to_string()))
    }

    pub fn for_expert(&self, expert: &str) -> Result<&PricingEntry, EvalError> {
        let family = self
            .expert_family
            .get(expert)
            .ok_or_else(|| EvalError::UnpricedExpert(expert.to_string()))?;
        self.family(family)
    }

    pub fn record_cost(&self, record: &PredictionRecord) -> Result<Picodollars, EvalError> {
        Ok(query_cost(
            record.input_tokens,
            record.output_tokens,
            self.for_expert(&record.expert_name)?,
        ))
    }
}

/// The four reported dimensions of one expert or routing method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub total_cost_usd: f64,
    pub mean_throughput: f64,
    pub mean_bertsim: f64,
    pub mean_nll: f64,
}

/// [`MethodMetrics`] with the exact cost and record count behind them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metrics: MethodMetrics,
    pub total_cost_pico: Picodollars,
    pub queries: usize,
}

/// Aggregate per-query outcomes. Records are taken in query-id order; the
/// throughput is the mean of per-query ratios.
pub fn summarize(
    records: &[&PredictionRecord],
    pricing: &PricingTable,
) -> Result<Summary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted: Vec<&PredictionRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let mut cost: Picodollars = 0;
    let (mut tp, mut sim, mut nll) = (0.0, 0.0, 0.0);
    for r in &sorted {
        if !(r.inference_seconds > 0.0) {
            return Err(EvalError::NonPositiveTime {
                query_id: r.query_id.clone(),
                expert: r.expert_name.clone(),
            });
        }
        cost += pricing.record_cost(r)?;
        tp += r.throughput();
        sim += r.bert_sim;
        nll += r.nll;
    }
    let n = sorted.len() as f64;
    Ok(Summary {
        metrics: MethodMetrics {
            total_cost_usd: pico_to_usd(cost),
            mean_throughput: tp / n,
            mean_bertsim: sim / n,
            mean_nll: nll / n,
        },
        total_cost_pico: cost,
        queries: sorted.len(),
    })
}

/// Componentwise mean of all expert rows: the no-routing baseline.
pub fn zero_router(rows: &[MethodMetrics]) -> Result<MethodMetrics, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MethodMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(MethodMetrics {
        total_cost_usd: mean(|m| m.total_cost_usd),
        mean_throughput: mean(|m| m.mean_throughput),
        mean_bertsim: mean(|m| m.mean_bertsim),
        mean_nll: mean(|m| m.mean_nll),
    })
}

/// Best value per dimension over every row.
pub fn optimal_bounds(rows: &[MethodMetrics]) -> Result<MethodMetrics, EvalError> {
    let first = rows.first().ok_or(EvalError::Empty)?;
    Ok(rows.iter().fold(*first, |acc, m| MethodMetrics {
        total_cost_usd: acc.total_cost_usd.min(m.total_cost_usd),
        mean_throughput: acc.mean_throughput.max(m.mean_throughput),
        mean_bertsim: acc.mean_bertsim.max(m.mean_bertsim),
        mean_nll: acc.mean_nll.min(m.mean_nll),
    }))
}

/// Per query, the highest BERTSim any expert recorded; the oracle choice.
pub fn oracle_decisions(test: &[TestExample]) -> BTreeMap<String, String> {
    test.iter()
        .map(|t| (t.query.id.clone(), t.best_expert().to_string()))
        .collect()
}

/// Mean over queries of the best BERTSim any expert recorded.
pub fn optimal_bertsim(test: &[TestExample]) -> Result<f64, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let total: f64 = test
        .iter()
        .map(|t| {
            t.records
                .iter()
                .map(|r| r.bert_sim)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / test.len() as f64)
}

/// The record each decision points at, in test order.
pub fn outcomes<'a>(
    method: &str,
    test: &'a [TestExample],
    decisions: &BTreeMap<String, String>,
) -> Result<Vec<&'a PredictionRecord>, EvalError> {
    test.iter()
        .map(|t| {
            let expert = decisions
                .get(&t.query.id)
                .ok_or_else(|| EvalError::MissingDecision {
                    method: method.to_string(),
                    query_id: t.query.id.clone(),
                })?;
            t.record(expert).ok_or_else(|| EvalError::MissingRecord {
                query_id: t.query.id.clone(),
                expert: expert.clone(),
            })
        })
        .collect()
}

/// Per-dataset quality means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub mean_bertsim: f64,
    pub mean_nll: f64,
    pub queries: usize,
}

pub fn breakdown(
    test: &[TestExample],
    records: &[&PredictionRecord],
) -> BTreeMap<String, Breakdown> {
    let tags: BTreeMap<&str, &str> = test
        .iter()
        .map(|t| (t.query.id.as_str(), t.query.dataset_tag.as_str()))
        .collect();
    let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let Some(tag) = tags.get(r.query_id.as_str()) else {
            continue;
        };
        let slot = acc.entry(tag.to_string()).or_default();
        slot.0 += r.bert_sim;
        slot.1 += r.nll;
        slot.2 += 1;
    }
    acc.into_iter()
        .map(|(tag, (s, n, c))| {
            (
                tag,
                Breakdown {
                    mean_bertsim: s / c as f64,
                    mean_nll: n / c as f64,
                    queries: c,
                },
            )
        })
        .collect()
}

/// Per-dataset mean of the best recorded BERTSim.
pub fn optimal_breakdown(test: &[TestExample]) -> BTreeMap<String, Breakdown> {
    let best: Vec<&PredictionRecord> = test
        .iter()
        .map(|t| t.record(t.best_expert()).expect("best expert has a record"))
        .collect();
    breakdown(test, &best)
}

/// Outcome of the repeated random protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomOutcome {
    /// Mean over trials of each dimension.
    pub metrics: MethodMetrics,
    /// Mean over trials of the per-dataset means.
    pub breakdown: BTreeMap<String, Breakdown>,
    /// Chosen expert per test query, one map per trial.
    pub trials: Vec<BTreeMap<String, String>>,
}

/// Route every test query uniformly at random, score it, repeat `trials`
/// times from one seeded generator and average.
pub fn random_protocol(
    test: &[TestExample],
    experts: &ExpertSet,
    trials: usize,
    seed: u64,
    pricing: &PricingTable,
) -> Result<RandomOutcome, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut order: Vec<&TestExample> = test.iter().collect();
    order.sort_by(|a, b| a.query.id.cmp(&b.query.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = [0.0; 4];
    let mut per_tag: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let mut all = Vec::with_capacity(trials);
    for _ in 0..trials {
        let decisions: BTreeMap<String, String> = order
            .iter()
            .map(|t| {
                let d = route_random(&t.query.id, experts, &mut rng);
                (t.query.id.clone(), d.chosen_expert)
            })
            .collect();
        let records = outcomes("random", test, &decisions)?;
        let m = summarize(&records, pricing)?.metrics;
        for (s, v) in sums.iter_mut().zip([
            m.total_cost_usd,
            m.mean_throughput,
            m.mean_bertsim,
            m.mean_nll,
        ]) {
            *s += v;
        }
        for (tag, b) in breakdown(test, &records) {
            let slot = per_tag.entry(tag).or_default();
            slot.0 += b.mean_bertsim;
            slot.1 += b.mean_nll;
            slot.2 = b.queries;
        }
        all.push(decisions);
    }
    let t = trials as f64;
    Ok(RandomOutcome {
        metrics: MethodMetrics {
            total_cost_usd: sums[0] / t,
            mean_throughput: sums[1] / t,
            mean_bertsim: sums[2] / t,
            mean_nll: sums[3] / t,
        },
        breakdown: per_tag
            .into_iter()
            .map(|(tag, (s, n, c))| {
                (
                    tag,
                    Breakdown {
                        mean_bertsim: s / t,
                        mean_nll: n / t,
                        queries: c,
                    },
                )
            })
            .collect(),
        trials: all,
    })
}

/// method → expert → number of test queries sent there.
pub type QueryCountMatrix = BTreeMap<String, BTreeMap<String, usize>>;

/// Count decisions per method. Each method lists (query id, expert) pairs;
/// a query may appear once per method.
pub fn query_counts(
    decisions: &BTreeMap<String, Vec<(String, String)>>,
    experts: &ExpertSet,
) -> Result<QueryCountMatrix, EvalError> {
    let mut matrix = QueryCountMatrix::new();
    for (method, list) in decisions {
        let mut seen = BTreeSet::new();
        let mut row: BTreeMap<String, usize> =
            experts.names().iter().map(|e| (e.clone(), 0)).collect();
        for (query_id, expert) in list {
            if !seen.insert(query_id) {
                return Err(EvalError::DuplicateDecision {
                    method: method.clone(),
                    query_id: query_id.clone(),
                });
            }
            *row.entry(expert.clone()).or_default() += 1;
        }
        matrix.insert(method.clone(), row);
    }
    Ok(matrix)
}

/// Expert with the most queries in a count row; ties to the smallest name.
pub fn modal_expert(row: &BTreeMap<String, usize>) -> Option<&str> {
    let mut best: Option<(&str, usize)> = None;
    for (e, c) in row {
        if best.is_none_or(|(_, b)| *c > b) {
            best = Some((e, *c));
        }
    }
    best.map(|(e, _)| e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Expert,
    Router,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub kind: RowKind,
    pub metrics: MethodMetrics,
}

/// Top-3 positions per column among expert and router rows; baselines are
/// not ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ranks {
    pub cost: Option<u8>,
    pub throughput: Option<u8>,
    pub bertsim: Option<u8>,
    pub nll: Option<u8>,
}

pub fn rankings(rows: &[ReportRow]) -> BTreeMap<String, Ranks> {
    let ranked: Vec<&ReportRow> = rows
        .iter()
        .filter(|r| r.kind != RowKind::Baseline)
        .collect();
    let mut out: BTreeMap<String, Ranks> = ranked
        .iter()
        .map(|r| (r.name.clone(), Ranks::default()))
        .collect();
    let columns: [(
        fn(&MethodMetrics) -> f64,
        bool,
        fn(&mut Ranks) -> &mut Option<u8>,
    ); 4] = [
        (|m| m.total_cost_usd, false, |r| &mut r.cost),
        (|m| m.mean_throughput, true, |r| &mut r.throughput),
        (|m| m.mean_bertsim, true, |r| &mut r.bertsim),
        (|m| m.mean_nll, false, |r| &mut r.nll),
    ];
    for (value, higher_is_better, slot) in columns {
        let mut order = ranked.clone();
        order.sort_by(|a, b| {
            let (x, y) = (value(&a.metrics), value(&b.metrics));
            let c = if higher_is_better {
                y.total_cmp(&x)
            } else {
                x.total_cmp(&y)
            };
            c.then_with(|| a.name.cmp(&b.name))
        });
        for (pos, row) in order.iter().take(3).enumerate() {
            *slot(out.get_mut(&row.name).expect("ranked row")) = Some(pos as u8 + 1);
        }
    }
    out
}

/// A section that renders an explicit marker when empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Section<T> {
    Data(T),
    NoData(String),
}

pub const NO_DATA: &str = "no data";

/// Everything one evaluation run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experts: ExpertSet,
    pub test_queries: usize,
    pub rows: Vec<ReportRow>,
    /// Per-dataset BERTSim and NLL, keyed by row name.
    pub breakdowns: BTreeMap<String, BTreeMap<String, Breakdown>>,
    pub counts: QueryCountMatrix,
    /// Share of test queries each router sent to their best expert.
    #[serde(default)]
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct StructuredReport<'a> {
    experts: &'a ExpertSet,
    test_queries: usize,
    metrics: &'a [ReportRow],
    rankings: BTreeMap<String, Ranks>,
    selection_accuracy: &'a BTreeMap<String, f64>,
    counts: Section<&'a QueryCountMatrix>,
    breakdowns: Section<&'a BTreeMap<String, BTreeMap<String, Breakdown>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Structured,
    Tabular,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        let doc = StructuredReport {
            experts: &self.experts,
            test_queries: self.test_queries,
            metrics: &self.rows,
            rankings: rankings(&self.rows),
            selection_accuracy: &self.accuracy,
            counts: if self.counts.is_empty() {
                Section::NoData(NO_DATA.into())
            } else {
                Section::Data(&self.counts)
            },
            breakdowns: if self.breakdowns.is_empty() {
                Section::NoData(NO_DATA.into())
            } else {
                Section::Data(&self.breakdowns)
            },
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
        s.push('\n');
        s
    }

    /// Rows in the column order Model/Router, Total Cost, Throughput,
    /// BERTSim, NLL, followed by the rank of each column.
    pub fn table_csv(&self) -> String {
        let ranks = rankings(&self.rows);
        let rank = |r: Option<u8>| r.map(|v| v.to_string()).unwrap_or_default();
        let rows = self.rows.iter().map(|row| {
            let m = &row.metrics;
            let r = ranks.get(&row.name).copied().unwrap_or_default();
            let kind = match row.kind {
                RowKind::Expert => "expert",
                RowKind::Router => "router",
                RowKind::Baseline => "baseline",
            };
            vec![
                row.name.clone(),
                kind.to_string(),
                format!("{:.6}", m.total_cost_usd),
                format!("{:.3}", m.mean_throughput),
                format!("{:.6}", m.mean_bertsim),
                format!("{:.6}", m.mean_nll),
                rank(r.cost),
                rank(r.throughput),
                rank(r.bertsim),
                rank(r.nll),
            ]
        });
        to_csv(
            &[
                "name",
                "kind",
                "total_cost_usd",
                "throughput",
                "bertsim",
                "nll",
                "cost_rank",
                "throughput_rank",
                "bertsim_rank",
                "nll_rank",
            ],
            rows,
        )
    }

    pub fn breakdown_csv(&self) -> String {
        let header = ["name", "dataset", "queries", "bertsim", "nll"];
        if self.breakdowns.is_empty() {
            return to_csv(&header, std::iter::once(vec![NO_DATA.to_string()]));
        }
        let rows = self.breakdowns.iter().flat_map(|(name, tags)| {
            tags.iter().map(move |(tag, b)| {
                vec![
                    name.clone(),
                    tag.clone(),
                    b.queries.to_string(),
                    format!("{:.6}", b.mean_bertsim),
                    format!("{:.6}", b.mean_nll),
                ]
            })
        });
        to_csv(&header, rows)
    }

    pub fn counts_csv(&self) -> String {
        let mut header = vec!["method"];
        header.extend(self.experts.names().iter().map(String::as_str));
        if self.counts.is_empty() {
            return to_csv(&header, std::iter::once(vec![NO_DATA.to_string()]));
        }
        let rows = self.counts.iter().map(|(method, row)| {
            let mut cells = vec![method.clone()];
            cells.extend(
                self.experts
                    .names()
                    .iter()
                    .map(|e| row.get(e).copied().unwrap_or(0).to_string()),
            );
            cells
        });
        to_csv(&header, rows)
    }
}

fn to_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Write the report into `dir`: `report.json` for the structured format;
/// `table.csv`, `breakdown.csv` and `counts.csv` for the tabular one.
/// Returns the written paths.
pub fn emit_report(
    report: &EvalReport,
    dir: &Path,
    format: ReportFormat,
) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let files: Vec<(&str, String)> = match format {
        ReportFormat::Structured => vec![("report.json", report.to_json())],
        ReportFormat::Tabular => vec![
            ("table.csv", report.table_csv()),
            ("breakdown.csv", report.breakdown_csv()),
            ("counts.csv", report.counts_csv()),
        ],
    };
    files
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| EvalError::Io {
                path: path.clone(),
                source,
            })?;
            Ok(path)
        })
        .collect()
}
