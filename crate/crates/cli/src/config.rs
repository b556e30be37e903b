use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xroute_core::pipeline::PipelineSettings;
use xroute_core::routers::Method;
use xroute_core::simx::CANONICAL_MIX;

use crate::error::CliError;

/// One input corpus and the dataset tag its queries carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub path: PathBuf,
    pub tag: String,
}

/// Everything a command needs. Built-in defaults, overridden by the config
/// file, overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Artifact directory; every output lands below it.
    pub out: PathBuf,
    pub corpora: Vec<CorpusSpec>,
    /// Simulated fleet file. The canonical fleet when absent.
    pub fleet: Option<PathBuf>,
    /// Gateway-style file whose `[[expert]]` entries replace the fleet.
    pub experts: Option<PathBuf>,
    /// Gateway config used by `serve`.
    pub gateway: Option<PathBuf>,
    pub methods: Vec<Method>,
    /// Synthetic corpus size per dataset tag, for `simulate`.
    pub mix: BTreeMap<String, usize>,
    pub pipeline: PipelineSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("artifacts"),
            corpora: Vec::new(),
            fleet: None,
            experts: None,
            gateway: None,
            methods: Method::ALL.to_vec(),
            mix: CANONICAL_MIX
                .iter()
                .map(|(t, n)| (t.to_string(), *n))
                .collect(),
            pipeline: PipelineSettings::default(),
        }
    }
}

/// Flag values; `None` keeps the config value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub methods: Option<Vec<Method>>,
    pub temperature: Option<f64>,
    pub trials: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(single_line(&e.to_string())))
    }

    /// Read a config file. Relative paths in it resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| *p = base.join(&*p);
        rebase(&mut config.out);
        config.corpora.iter_mut().for_each(|c| rebase(&mut c.path));
        for p in [&mut config.fleet, &mut config.experts, &mut config.gateway]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
        Ok(config)
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.pipeline = self.pipeline.with_seed(seed);
        }
        if let Some(m) = &o.methods {
            self.methods = m.clone();
        }
        if let Some(t) = o.temperature {
            self.pipeline.temperature = t;
        }
        if let Some(t) = o.trials {
            self.pipeline.trials = t;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self
    }

    /// Checks run at command start: settings ranges and that every
    /// referenced input exists.
    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        if self.methods.is_empty() {
            return Err(CliError::config("no router method selected"));
        }
        let inputs = self.corpora.iter().map(|c| &c.path).chain(
            [&self.fleet, &self.experts, &self.gateway]
                .into_iter()
                .flatten(),
        );
        for p in inputs {
            if !p.exists() {
                return Err(CliError::config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

pub fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_standard_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.pipeline.temperature, 10.0);
        assert_eq!(c.pipeline.trials, 10);
        assert_eq!(c.pipeline.seed, 42);
        assert_eq!(c.pipeline.mlp.hidden_size, 256);
        assert_eq!(c.pipeline.mlp.learning_rate, 5e-3);
        assert_eq!(c.pipeline.head.learning_rate, 5e-5);
        assert_eq!(c.pipeline.mlp.batch_size, 8);
        assert_eq!(c.pipeline.mlp.epochs, 5);
        assert_eq!(c.methods, Method::ALL.to_vec());
    }

    #[test]
    fn flags_beat_the_file_and_the_file_beats_defaults() {
        let c = RunConfig::parse("[pipeline]\ntemperature = 2.0\ntrials = 3\n").unwrap();
        assert_eq!((c.pipeline.temperature, c.pipeline.trials), (2.0, 3));
        let c = c.apply(&Overrides {
            temperature: Some(5.0),
            seed: Some(7),
            ..Overrides::default()
        });
        assert_eq!((c.pipeline.temperature, c.pipeline.trials), (5.0, 3));
        assert_eq!(
            (c.pipeline.seed, c.pipeline.mlp.seed, c.pipeline.head.seed),
            (7, 7, 7)
        );
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert!(RunConfig::parse("nonsense = 1").is_err());
        let c = RunConfig::default().apply(&Overrides {
            trials: Some(0),
            ..Overrides::default()
        });
        assert_eq!(c.validate().unwrap_err().code, crate::error::EXIT_CONFIG);
        let mut c = RunConfig::default();
        c.fleet = Some(PathBuf::from("/definitely/missing.toml"));
        assert!(c.validate().unwrap_err().message.contains("does not exist"));
    }
}
