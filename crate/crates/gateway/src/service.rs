use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use xroute_core::eval::{pico_to_usd, query_cost, Picodollars, PricingTable};
use xroute_core::routers::{load_router, Method, Router};
use xroute_core::simx::{canonical_fleet, load_sim_fleet, SimulatedExpert};
use xroute_core::{content_id, ExpertAdaptor, ExpertReply, ExpertRequest};

use crate::config::{
    AdaptorKind, ExpertEndpointConfig, FallbackPolicy, GatewayConfig, Locality, LocalityPolicy,
};
use crate::prompt::render_prompt;
use crate::remote::RemoteAdaptor;
use crate::GatewayError;

/// Decisions kept for the rolling decision-latency mean.
pub const LATENCY_WINDOW: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub expert: String,
    pub response: String,
    pub scores: BTreeMap<String, f64>,
    pub cost_usd: f64,
    pub cost_picodollars: Picodollars,
    pub decision_ms: f64,
    pub expert_ms: f64,
    pub degraded: bool,
    pub method: Method,
    pub locality: Locality,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Mean NLL of the reply, when the expert returned log-probabilities.
    pub nll: Option<f64>,
    /// The router's pick when a fallback expert answered instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub total_requests: u64,
    pub failed_requests: u64,
    pub degraded_requests: u64,
    pub expert_hits: BTreeMap<String, u64>,
    pub cumulative_cost_picodollars: Picodollars,
    pub cumulative_cost_usd: f64,
    /// Mean over the last `LATENCY_WINDOW` routing decisions.
    pub mean_decision_ms: f64,
    /// Calls handed to experts marked `cloud`, including failed ones.
    pub cloud_dispatches: u64,
}

#[derive(Debug, Default)]
struct StatsState {
    total: u64,
    failed: u64,
    degraded: u64,
    hits: BTreeMap<String, u64>,
    cost: Picodollars,
    window: VecDeque<f64>,
}

pub struct Endpoint {
    pub config: ExpertEndpointConfig,
    pub adaptor: Arc<dyn ExpertAdaptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayOptions {
    pub timeout: Duration,
    pub fallback: FallbackPolicy,
    pub locality: LocalityPolicy,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            fallback: FallbackPolicy::Fail,
            locality: LocalityPolicy::default(),
        }
    }
}

/// The configured pricing table with every expert bound to its family.
pub fn pricing_from_config(config: &GatewayConfig) -> Result<PricingTable, GatewayError> {
    let pricing = match &config.pricing {
        Some(table) => PricingTable::new(table)?,
        None => PricingTable::reference(),
    };
    Ok(config
        .experts
        .iter()
        .try_fold(pricing, |t, e| t.with_expert(&e.name, &e.pricing_family))?)
}

/// One adaptor per configured expert, in config order.
pub fn endpoints_from_config(config: &GatewayConfig) -> Result<Vec<Endpoint>, GatewayError> {
    let needs_fleet = config
        .experts
        .iter()
        .any(|e| e.kind == AdaptorKind::Simulated);
    let fleet = if !needs_fleet {
        Vec::new()
    } else if let Some(path) = &config.fleet.path {
        load_sim_fleet(path)
            .map_err(|e| GatewayError::Config(e.to_string()))?
            .into_iter()
            .map(|(c, _)| c)
            .collect()
    } else {
        canonical_fleet(config.fleet.seed)
    };
    config
        .experts
        .iter()
        .map(|e| {
            let adaptor: Arc<dyn ExpertAdaptor> = match e.kind {
                AdaptorKind::Simulated => {
                    let sim = fleet.iter().find(|c| c.name == e.name).ok_or_else(|| {
                        GatewayError::Config(format!("no simulated expert named {:?}", e.name))
                    })?;
                    Arc::new(
                        SimulatedExpert::new(sim.clone())
                            .map_err(|m| GatewayError::Config(m.to_string()))?,
                    )
                }
                AdaptorKind::Remote => {
                    let remote = e.remote.clone().expect("validated");
                    Arc::new(RemoteAdaptor::new(&e.name, remote).map_err(GatewayError::Config)?)
                }
            };
            Ok(Endpoint {
                config: e.clone(),
                adaptor,
            })
        })
        .collect()
}

/// The serving path: route, render, dispatch, account.
///
/// Routers and endpoints are read-only after construction; only the stats
/// sit behind a lock.
pub struct Gateway {
    routers: Vec<Router>,
    endpoints: BTreeMap<String, Endpoint>,
    pricing: PricingTable,
    options: GatewayOptions,
    stats: Mutex<StatsState>,
    cloud_dispatches: AtomicU64,
}

impl Gateway {
    pub fn new(
        routers: Vec<Router>,
        endpoints: Vec<Endpoint>,
        pricing: PricingTable,
        options: GatewayOptions,
    ) -> Result<Self, GatewayError> {
        if routers.is_empty() {
            return Err(GatewayError::Config("no router loaded".into()));
        }
        let mut by_name = BTreeMap::new();
        for e in endpoints {
            pricing.for_expert(&e.config.name)?;
            let name = e.config.name.clone();
            if by_name.insert(name.clone(), e).is_some() {
                return Err(GatewayError::Config(format!("duplicate expert {name:?}")));
            }
        }
        for r in &routers {
            if let Some(missing) = r
                .experts()
                .names()
                .iter()
                .find(|n| !by_name.contains_key(*n))
            {
                return Err(GatewayError::Config(format!(
                    "{} router knows expert {missing:?}, which has no endpoint",
                    r.method().as_str()
                )));
            }
        }
        if let FallbackPolicy::Expert(name) = &options.fallback {
            if !by_name.contains_key(name) {
                return Err(GatewayError::Config(format!(
                    "fallback expert {name:?} has no endpoint"
                )));
            }
        }
        let hits = by_name.keys().map(|k| (k.clone(), 0)).collect();
        Ok(Self {
            routers,
            endpoints: by_name,
            pricing,
            options,
            stats: Mutex::new(StatsState {
                hits,
                ..StatsState::default()
            }),
            cloud_dispatches: AtomicU64::new(0),
        })
    }

    /// Load routers, build adaptors and pricing from a config.
    pub fn from_config(config: &GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        if config.routers.is_empty() {
            return Err(GatewayError::Config(
                "at least one router is required".into(),
            ));
        }
        let routers = config
            .routers
            .iter()
            .map(|p| load_router(p))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(
            routers,
            endpoints_from_config(config)?,
            pricing_from_config(config)?,
            GatewayOptions {
                timeout: Duration::from_secs_f64(config.timeout_seconds),
                fallback: config.fallback.clone(),
                locality: config.locality,
            },
        )
    }

    pub fn methods(&self) -> Vec<Method> {
        self.routers.iter().map(Router::method).collect()
    }

    fn router(&self, method: Option<Method>) -> Result<&Router, GatewayError> {
        match method {
            None => Ok(&self.routers[0]),
            Some(m) => self
                .routers
                .iter()
                .find(|r| r.method() == m)
                .ok_or_else(|| {
                    GatewayError::BadRequest(format!("no {} router is loaded", m.as_str()))
                }),
        }
    }

    /// Apply the locality policy to a score vector.
    fn target(&self, chosen: &str, scores: &BTreeMap<String, f64>) -> String {
        let policy = self.options.locality;
        if !policy.enabled {
            return chosen.to_string();
        }
        let best = scores.get(chosen).copied().unwrap_or(f64::NEG_INFINITY);
        let local = scores
            .iter()
            .filter(|(name, _)| {
                self.endpoints
                    .get(*name)
                    .is_some_and(|e| e.config.locality == Locality::Local)
            })
            .fold(None::<(&String, f64)>, |acc, (n, s)| match acc {
                Some((_, a)) if a >= *s => acc,
                _ => Some((n, *s)),
            });
        match local {
            Some((name, score)) if score >= best - policy.margin => name.clone(),
            _ => chosen.to_string(),
        }
    }

    fn dispatch(
        &self,
        expert: &str,
        query_id: &str,
        text: &str,
    ) -> Result<ExpertReply, GatewayError> {
        let endpoint = &self.endpoints[expert];
        let prompt =
            render_prompt(&endpoint.config.template, text).map_err(GatewayError::Config)?;
        if endpoint.config.locality == Locality::Cloud {
            self.cloud_dispatches.fetch_add(1, Ordering::Relaxed);
        }
        let request = ExpertRequest {
            query_id,
            prompt: &prompt,
            reference: None,
            dataset_tag: None,
            params: &endpoint.config.generation,
            timeout: self.options.timeout,
        };
        Ok(endpoint.adaptor.execute(&request)?)
    }

    pub fn handle_query(&self, request: &QueryRequest) -> Result<QueryResponse, GatewayError> {
        let result = self.answer(request);
        if result.is_err() {
            self.stats.lock().expect("stats lock").failed += 1;
        }
        result
    }

    fn answer(&self, request: &QueryRequest) -> Result<QueryResponse, GatewayError> {
        if request.text.trim().is_empty() {
            return Err(GatewayError::BadRequest("text must not be empty".into()));
        }
        let router = self.router(request.method)?;
        let query_id = content_id(&request.text);

        let started = Instant::now();
        let decision = router.route(&query_id, &request.text)?;
        let decision_ms = started.elapsed().as_secs_f64() * 1e3;
        tracing::info!(method = router.method().as_str(), scores = ?decision.scores, "routed");
        let target = self.target(&decision.chosen_expert, &decision.scores);

        let started = Instant::now();
        let (expert, reply, fallback_from) = match self.dispatch(&target, &query_id, &request.text)
        {
            Ok(reply) => (target, reply, None),
            Err(err) => match &self.options.fallback {
                FallbackPolicy::Expert(fb) if *fb != target => {
                    tracing::warn!(expert = %target, error = %err, fallback = %fb, "expert failed, falling back");
                    let reply = self.dispatch(fb, &query_id, &request.text)?;
                    (fb.clone(), reply, Some(target))
                }
                _ => return Err(err),
            },
        };
        let expert_ms = started.elapsed().as_secs_f64() * 1e3;

        let cost = query_cost(
            reply.input_tokens,
            reply.output_tokens,
            self.pricing.for_expert(&expert)?,
        );
        let degraded = fallback_from.is_some();
        {
            let mut s = self.stats.lock().expect("stats lock");
            s.total += 1;
            *s.hits.get_mut(&expert).expect("configured expert") += 1;
            s.cost += cost;
            s.degraded += u64::from(degraded);
            if s.window.len() == LATENCY_WINDOW {
                s.window.pop_front();
            }
            s.window.push_back(decision_ms);
        }
        Ok(QueryResponse {
            locality: self.endpoints[&expert].config.locality,
            nll: reply.mean_nll(),
            expert,
            response: reply.response_text,
            scores: decision.scores,
            cost_usd: pico_to_usd(cost),
            cost_picodollars: cost,
            decision_ms,
            expert_ms,
            degraded,
            method: router.method(),
            input_tokens: reply.input_tokens,
            output_tokens: reply.output_tokens,
            fallback_from,
        })
    }

    pub fn stats(&self) -> GatewayStats {
        let s = self.stats.lock().expect("stats lock");
        let mean = if s.window.is_empty() {
            0.0
        } else {
            s.window.iter().sum::<f64>() / s.window.len() as f64
        };
        GatewayStats {
            total_requests: s.total,
            failed_requests: s.failed,
            degraded_requests: s.degraded,
            expert_hits: s.hits.clone(),
            cumulative_cost_picodollars: s.cost,
            cumulative_cost_usd: pico_to_usd(s.cost),
            mean_decision_ms: mean,
            cloud_dispatches: self.cloud_dispatches.load(Ordering::Relaxed),
        }
    }
}
