//! Simulated experts and synthetic corpora, so that every stage can run
//! offline and deterministically.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataprep::Query;
use crate::embed::tokenize;
use crate::expert::{AdaptorError, ExpertAdaptor, ExpertReply, ExpertRequest};
use crate::hash::derive_seed;

/// Affinity used for dataset tags a simulated expert has no entry for.
pub const DEFAULT_AFFINITY_FLOOR: f64 = 0.1;
/// Scale of the simulated per-token negative log-likelihood.
pub const NLL_SCALE: f64 = 8.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("fleet file {path}: {message}")]
    Read { path: String, message: String },
    #[error("fleet config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("fleet has no experts")]
    EmptyFleet,
    #[error("duplicate simulated expert {0:?}")]
    DuplicateName(String),
    #[error("expert {expert}: {message}")]
    Invalid { expert: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub base_seconds: f64,
    /// Standard deviation of the log-latency.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenModel {
    pub mean: u64,
    /// Half-width of the uniform spread around `mean`.
    #[serde(default)]
    pub spread: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimExpertConfig {
    pub name: String,
    pub pricing_family: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_floor")]
    pub affinity_floor: f64,
    /// Sleep for the sampled latency instead of only reporting it.
    #[serde(default)]
    pub realtime: bool,
    pub affinity: BTreeMap<String, f64>,
    pub latency: LatencyModel,
    pub tokens: TokenModel,
}

fn default_seed() -> u64 {
    crate::DEFAULT_SEED
}

fn default_floor() -> f64 {
    DEFAULT_AFFINITY_FLOOR
}

impl SimExpertConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |message: String| {
            Err(SimError::Invalid {
                expert: self.name.clone(),
                message,
            })
        };
        if self.name.trim().is_empty() {
            return invalid("empty name".into());
        }
        for (tag, a) in self
            .affinity
            .iter()
            .chain([(&"<floor>".to_string(), &self.affinity_floor)])
        {
            if !(0.0..=1.0).contains(a) {
                return invalid(format!("affinity {a} for {tag} outside [0, 1]"));
            }
        }
        if !(self.latency.base_seconds.is_finite() && self.latency.base_seconds > 0.0) {
            return invalid("latency base_seconds must be positive".into());
        }
        if !(self.latency.jitter.is_finite() && self.latency.jitter >= 0.0) {
            return invalid("latency jitter must be >= 0".into());
        }
        if self.tokens.mean == 0 {
            return invalid("token mean must be positive".into());
        }
        Ok(())
    }

    pub fn affinity_for(&self, tag: Option<&str>) -> f64 {
        tag.and_then(|t| self.affinity.get(t).copied())
            .unwrap_or(self.affinity_floor)
    }
}

/// Sampled reply plus the latency it would take.
///
/// The text keeps the first `round(a · L)` reference tokens of a seeded
/// permutation and swaps the rest for noise tokens, so the kept set only
/// grows with the affinity `a`. Log-probabilities are `-(1 - a) · k · Exp(1)`.
pub fn simulate_reply(config: &SimExpertConfig, request: &ExpertRequest<'_>) -> ExpertReply {
    let affinity = config.affinity_for(request.dataset_tag);
    let base = derive_seed(
        config.seed,
        &format!("{}\u{1f}{}", config.name, request.query_id),
    );
    let rng = |label: &str| ChaCha8Rng::seed_from_u64(derive_seed(base, label));

    let latency: f64 = {
        let z: f64 = StandardNormal.sample(&mut rng("latency"));
        config.latency.base_seconds * (config.latency.jitter * z).exp()
    };

    let output_tokens = {
        let t = &config.tokens;
        let lo = t.mean.saturating_sub(t.spread).max(1);
        let hi = t.mean + t.spread;
        rng("tokens")
            .random_range(lo..=hi)
            .min(request.params.max_tokens as u64)
    };

    let reference = request.reference.unwrap_or(request.prompt);
    let ref_tokens = tokenize(reference);
    let keep = (affinity * ref_tokens.len() as f64).round() as usize;
    let response_text = if keep >= ref_tokens.len() {
        reference.to_string()
    } else {
        let mut order: Vec<usize> = (0..ref_tokens.len()).collect();
        order.shuffle(&mut rng("order"));
        let kept: BTreeSet<usize> = order[..keep].iter().copied().collect();
        let mut noise = rng("noise");
        let words: Vec<String> = ref_tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let filler = format!("x{:08x}", noise.random::<u32>());
                if kept.contains(&i) {
                    tok.clone()
                } else {
                    filler
                }
            })
            .collect();
        words.join(" ")
    };

    let mut lp_rng = rng("logprobs");
    let token_logprobs = (0..output_tokens)
        .map(|_| {
            let e: f64 = Exp1.sample(&mut lp_rng);
            -(1.0 - affinity) * NLL_SCALE * e
        })
        .collect();

    ExpertReply {
        response_text,
        input_tokens: tokenize(request.prompt).len() as u64,
        output_tokens,
        elapsed_seconds: latency,
        token_logprobs: Some(token_logprobs),
    }
}

/// An [`ExpertAdaptor`] backed by [`simulate_reply`].
///
/// Draws are derived from `(seed, expert, query id)` alone, so the adaptor
/// holds no mutable state and may be shared freely.
#[derive(Debug, Clone)]
pub struct SimulatedExpert {
    config: SimExpertConfig,
}

impl SimulatedExpert {
    pub fn new(config: SimExpertConfig) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &SimExpertConfig {
        &self.config
    }
}

impl ExpertAdaptor for SimulatedExpert {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn execute(&self, request: &ExpertRequest<'_>) -> Result<ExpertReply, AdaptorError> {
        let reply = simulate_reply(&self.config, request);
        let latency = Duration::from_secs_f64(reply.elapsed_seconds);
        if latency > request.timeout {
            if self.config.realtime {
                std::thread::sleep(request.timeout);
            }
            return Err(AdaptorError::Timeout {
                expert: self.config.name.clone(),
                after: request.timeout,
            });
        }
        if self.config.realtime {
            std::thread::sleep(latency);
        }
        Ok(reply)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetFile {
    #[serde(default)]
    pub expert: Vec<SimExpertConfig>,
}

pub fn parse_sim_fleet(text: &str) -> Result<Vec<SimExpertConfig>, SimError> {
    let file: FleetFile = toml::from_str(text)?;
    check_fleet(&file.expert)?;
    Ok(file.expert)
}

pub fn check_fleet(configs: &[SimExpertConfig]) -> Result<(), SimError> {
    if configs.is_empty() {
        return Err(SimError::EmptyFleet);
    }
    let mut seen = BTreeSet::new();
    for c in configs {
        if !seen.insert(c.name.as_str()) {
            return Err(SimError::DuplicateName(c.name.clone()));
        }
        c.validate()?;
    }
    Ok(())
}

/// Read a fleet file and build one adaptor per entry.
pub fn load_sim_fleet(
    path: &Path,
) -> Result<Vec<(SimExpertConfig, Arc<SimulatedExpert>)>, SimError> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    build_fleet(parse_sim_fleet(&text)?)
}

pub fn build_fleet(
    configs: Vec<SimExpertConfig>,
) -> Result<Vec<(SimExpertConfig, Arc<SimulatedExpert>)>, SimError> {
    check_fleet(&configs)?;
    configs
        .into_iter()
        .map(|c| Ok((c.clone(), Arc::new(SimulatedExpert::new(c)?))))
        .collect()
}

pub fn fleet_to_toml(configs: &[SimExpertConfig]) -> String {
    toml::to_string(&FleetFile {
        expert: configs.to_vec(),
    })
    .expect("fleet serializes")
}

/// Dataset tags of the canonical fixture.
pub const CANONICAL_TAGS: [&str; 4] = ["arc", "gsm8k", "mbpp", "pubmedqa"];

/// Tag sizes of the canonical corpus, in the proportion 2590:1319:974:1000.
pub const CANONICAL_MIX: [(&str, usize); 4] = [
    ("arc", 906),
    ("gsm8k", 462),
    ("mbpp", 341),
    ("pubmedqa", 350),
];

/// A corpus dominated by the general tag, where the small fast model is the
/// best expert for most queries.
pub const GENERAL_HEAVY_MIX: [(&str, usize); 4] = [
    ("arc", 1300),
    ("gsm8k", 250),
    ("mbpp", 250),
    ("pubmedqa", 250),
];

/// The seven-expert fleet: two biomedical, one code, one math and three
/// general models, one of which is small, cheap and fast and leads on the
/// general-knowledge tag.
pub fn canonical_fleet(seed: u64) -> Vec<SimExpertConfig> {
    // name, family, (arc, gsm8k, mbpp, pubmedqa), latency s, token mean
    let rows: [(&str, &str, [f64; 4], f64, u64); 7] = [
        ("biollama-sim", "llama", [0.45, 0.30, 0.25, 0.80], 1.4, 220),
        (
            "biomistral-sim",
            "mistral",
            [0.50, 0.35, 0.30, 0.65],
            0.9,
            180,
        ),
        ("codellama-sim", "llama", [0.40, 0.45, 0.85, 0.30], 2.5, 260),
        ("fox-sim", "fox", [0.85, 0.45, 0.40, 0.50], 0.35, 90),
        (
            "mathdeepseek-sim",
            "deepseek",
            [0.45, 0.85, 0.50, 0.30],
            1.1,
            200,
        ),
        (
            "mistralai-sim",
            "mistral",
            [0.65, 0.50, 0.45, 0.50],
            3.3,
            300,
        ),
        ("qwen-sim", "qwen", [0.70, 0.60, 0.60, 0.55], 2.1, 240),
    ];
    rows.iter()
        .map(|(name, family, aff, latency, tokens)| SimExpertConfig {
            name: name.to_string(),
            pricing_family: family.to_string(),
            seed,
            affinity_floor: DEFAULT_AFFINITY_FLOOR,
            realtime: false,
            affinity: CANONICAL_TAGS
                .iter()
                .zip(aff)
                .map(|(t, a)| (t.to_string(), *a))
                .collect(),
            latency: LatencyModel {
                base_seconds: *latency,
                jitter: 0.25,
            },
            tokens: TokenModel {
                mean: *tokens,
                spread: tokens / 4,
            },
        })
        .collect()
}

const SHARED_WORDS: &[&str] = &[
    "the",
    "a",
    "of",
    "and",
    "to",
    "in",
    "is",
    "what",
    "which",
    "how",
    "for",
    "with",
    "on",
    "that",
    "this",
    "are",
    "from",
    "by",
    "be",
    "answer",
    "question",
    "following",
    "given",
    "explain",
    "describe",
    "find",
    "result",
    "value",
    "best",
    "most",
];

fn domain_words(tag: &str) -> &'static [&'static str] {
    match tag {
        "arc" => &[
            "planet",
            "energy",
            "sunlight",
            "plant",
            "animal",
            "water",
            "rock",
            "weather",
            "season",
            "magnet",
            "force",
            "gravity",
            "heat",
            "light",
            "sound",
            "earth",
            "moon",
            "habitat",
            "fossil",
            "cloud",
            "rain",
            "soil",
            "mineral",
            "erosion",
            "orbit",
            "electricity",
            "circuit",
            "friction",
            "motion",
            "organism",
            "ecosystem",
            "predator",
            "prey",
            "climate",
            "volcano",
            "glacier",
            "ocean",
            "atmosphere",
            "oxygen",
            "seed",
        ],
        "gsm8k" => &[
            "apples",
            "dollars",
            "cost",
            "total",
            "each",
            "bought",
            "sold",
            "spent",
            "hours",
            "minutes",
            "per",
            "times",
            "half",
            "twice",
            "remaining",
            "left",
            "pays",
            "earns",
            "week",
            "month",
            "cookies",
            "tickets",
            "students",
            "pages",
            "miles",
            "average",
            "sum",
            "difference",
            "percent",
            "discount",
            "price",
            "profit",
            "boxes",
            "eggs",
            "marbles",
            "candies",
            "savings",
            "salary",
            "rate",
            "how_many",
        ],
        "mbpp" => &[
            "function",
            "python",
            "list",
            "return",
            "string",
            "integer",
            "array",
            "element",
            "write",
            "sort",
            "tuple",
            "dictionary",
            "key",
            "index",
            "loop",
            "recursion",
            "substring",
            "character",
            "sum_list",
            "maximum",
            "minimum",
            "reverse",
            "count",
            "filter",
            "map",
            "lambda",
            "regex",
            "binary",
            "matrix",
            "nested",
            "unique",
            "duplicate",
            "prime",
            "factorial",
            "fibonacci",
            "palindrome",
            "split",
            "join",
            "parameter",
            "input",
        ],
        "pubmedqa" => &[
            "patients",
            "clinical",
            "trial",
            "treatment",
            "disease",
            "cancer",
            "therapy",
            "risk",
            "cohort",
            "outcome",
            "mortality",
            "diagnosis",
            "symptoms",
            "hospital",
            "randomized",
            "placebo",
            "dose",
            "blood",
            "pressure",
            "diabetes",
            "cardiac",
            "tumor",
            "infection",
            "surgery",
            "study",
            "association",
            "prevalence",
            "incidence",
            "biomarker",
            "gene",
            "protein",
            "serum",
            "chronic",
            "acute",
            "receptor",
            "inflammation",
            "retrospective",
            "prognosis",
            "adverse",
            "efficacy",
        ],
        _ => &[],
    }
}

/// Deterministic instruction/reference pairs drawn from per-tag word lists
/// mixed with common words. Ids are `<tag>-<index>`.
pub fn synthetic_corpus(counts: &[(&str, usize)], seed: u64) -> Vec<Query> {
    let mut out = Vec::new();
    for (tag, n) in counts {
        let domain = domain_words(tag);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("corpus/{tag}")));
        let draw = |rng: &mut ChaCha8Rng, len: usize| -> String {
            (0..len)
                .map(|_| {
                    let pool = if domain.is_empty() || rng.random_bool(0.35) {
                        SHARED_WORDS
                    } else {
                        domain
                    };
                    *pool.choose(rng).expect("non-empty pool")
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        for i in 0..*n {
            let qlen = rng.random_range(8..=16);
            let rlen = rng.random_range(16..=32);
            let text = draw(&mut rng, qlen);
            let reference = draw(&mut rng, rlen);
            out.push(Query {
                id: format!("{tag}-{i:05}"),
                text,
                reference,
                dataset_tag: tag.to_string(),
            });
        }
    }
    out
}
