use std::fmt;

use serde::Serialize;
use xroute_core::dataprep::DataError;
use xroute_core::eval::EvalError;
use xroute_core::learn::LearnError;
use xroute_core::pipeline::PipelineError;
use xroute_core::routers::RouterError;
use xroute_core::simx::SimError;
use xroute_gateway::GatewayError;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_TRAINING: u8 = 4;
pub const EXIT_SERVING: u8 = 5;

/// A failed command: exit code, the module that raised it, and a message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub code: u8,
    pub module: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            module: "config",
            message: message.into(),
        }
    }

    pub fn data(module: &'static str, message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            module,
            message: message.into(),
        }
    }

    /// The single line written to stderr.
    pub fn to_line(&self) -> String {
        serde_json::to_string(&serde_json::json!({ "error": self })).expect("serializable")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.module, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data("dataprep", e.to_string())
    }
}

impl From<RouterError> for CliError {
    fn from(e: RouterError) -> Self {
        Self::data("routers", e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::data("eval", e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        Self {
            code: EXIT_CONFIG,
            module: "simx",
            message: e.to_string(),
        }
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        let code = match e {
            LearnError::Divergence { .. } | LearnError::NonFiniteGradient { .. } => EXIT_TRAINING,
            LearnError::Config(_) => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Self {
            code,
            module: "learn",
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data(e) => e.into(),
            PipelineError::Embed(e) => Self::data("embed", e.to_string()),
            PipelineError::Learn(e) => e.into(),
            PipelineError::Router(e) => e.into(),
            PipelineError::Eval(e) => e.into(),
            PipelineError::Sim(e) => e.into(),
            PipelineError::Invalid(m) => Self::config(m),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        let code = match e {
            GatewayError::Config(_) | GatewayError::Router(_) | GatewayError::Pricing(_) => {
                EXIT_CONFIG
            }
            _ => EXIT_SERVING,
        };
        Self {
            code,
            module: "gateway",
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_one_json_object() {
        let line = CliError::config("bad\nthing").to_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"]["code"], 2);
        assert_eq!(v["error"]["module"], "config");
    }

    #[test]
    fn divergence_maps_to_the_training_code() {
        let e: CliError = LearnError::Divergence {
            epoch: 1,
            trace: vec![f64::NAN],
        }
        .into();
        assert_eq!(e.code, EXIT_TRAINING);
        let e: CliError = LearnError::EmptyTrainingSet.into();
        assert_eq!(e.code, EXIT_DATA);
    }
}
