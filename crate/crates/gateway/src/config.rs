use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xroute_core::eval::UsdPrice;
use xroute_core::GenerationParams;

use crate::prompt::validate_template;
use crate::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptorKind {
    Remote,
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locality {
    Local,
    Cloud,
}

/// What to do when the chosen expert fails.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    #[default]
    Fail,
    /// Retry once on the named expert and flag the reply as degraded.
    Expert(String),
}

/// Connection details of a remote completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteEndpoint {
    pub url: String,
    pub model: String,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertEndpointConfig {
    pub name: String,
    pub kind: AdaptorKind,
    pub locality: Locality,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub generation: GenerationParams,
    pub pricing_family: String,
    #[serde(default)]
    pub remote: Option<RemoteEndpoint>,
}

fn default_template() -> String {
    "{query}".into()
}

/// Prefer a local expert whose score is within `margin` of the best.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalityPolicy {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub margin: f64,
}

/// Where simulated experts come from: a fleet file, or the canonical fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for FleetSource {
    fn default() -> Self {
        Self {
            path: None,
            seed: xroute_core::DEFAULT_SEED,
        }
    }
}

fn default_seed() -> u64 {
    xroute_core::DEFAULT_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    /// Router artifact directories. The first one answers requests that
    /// carry no method.
    #[serde(default)]
    pub routers: Vec<PathBuf>,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
    #[serde(default)]
    pub fallback: FallbackPolicy,
    #[serde(default)]
    pub locality: LocalityPolicy,
    #[serde(default)]
    pub fleet: FleetSource,
    /// Per-family prices in USD per million tokens; the reference table
    /// when absent.
    #[serde(default)]
    pub pricing: Option<BTreeMap<String, UsdPrice>>,
    #[serde(rename = "expert")]
    pub experts: Vec<ExpertEndpointConfig>,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_timeout() -> f64 {
    60.0
}

impl GatewayConfig {
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let config: Self = toml::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Read a config file; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for r in &mut config.routers {
            *r = base.join(&*r);
        }
        if let Some(p) = &mut config.fleet.path {
            *p = base.join(&*p);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(m));
        if self.experts.is_empty() {
            return bad("at least one expert is required".into());
        }
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return bad(format!(
                "timeout_seconds {} must be positive",
                self.timeout_seconds
            ));
        }
        if !(self.locality.margin.is_finite() && self.locality.margin >= 0.0) {
            return bad("locality margin must be non-negative".into());
        }
        let mut seen = BTreeSet::new();
        for e in &self.experts {
            if !seen.insert(e.name.as_str()) {
                return bad(format!("duplicate expert {:?}", e.name));
            }
            validate_template(&e.template)
                .map_err(|m| GatewayError::Config(format!("expert {}: {m}", e.name)))?;
            e.generation
                .validate()
                .map_err(|m| GatewayError::Config(format!("expert {}: {m}", e.name)))?;
            if e.kind == AdaptorKind::Remote && e.remote.is_none() {
                return bad(format!(
                    "remote expert {} needs a [expert.remote] table",
                    e.name
                ));
            }
        }
        if let FallbackPolicy::Expert(name) = &self.fallback {
            if !seen.contains(name.as_str()) {
                return bad(format!("fallback expert {name:?} is not configured"));
            }
        }
        Ok(())
    }

    pub fn expert(&self, name: &str) -> Option<&ExpertEndpointConfig> {
        self.experts.iter().find(|e| e.name == name)
    }
}
