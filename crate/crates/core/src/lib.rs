//! Core of the expert router: everything needed to prepare routing data,
//! train prompt-to-expert classifiers, route queries and score the result.
//!
//! The serving endpoint lives in `xroute-gateway`; the command line driver in
//! `xroute`.

pub mod dataprep;
pub mod embed;
pub mod eval;
pub mod expert;
pub mod learn;
pub mod pipeline;
pub mod routers;
pub mod simx;
pub mod tensorfile;

mod hash;

pub use expert::{
    AdaptorError, ExpertAdaptor, ExpertReply, ExpertRequest, ExpertSet, GenerationParams,
};

/// Seed used for every stochastic step unless overridden.
pub const DEFAULT_SEED: u64 = 42;

/// A stable identifier for a text, used as the query id of live requests so
/// that equal texts draw equal simulated replies.
pub fn content_id(text: &str) -> String {
    format!("q{:016x}", hash::fnv1a(text.as_bytes()))
}
