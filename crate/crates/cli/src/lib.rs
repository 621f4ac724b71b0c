//! Config loading, the staged experiment pipeline and report aggregation
//! behind the `breadcrumbs` binary.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{ConfigError, ExperimentConfig, Overrides};
pub use pipeline::{cmd_generate, cmd_run, cmd_verify, Pipeline, RunSummary};
pub use report::cmd_report;

/// Process exit status for an error chain: 1 for configuration problems,
/// 2 for anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>() || matches!(e.downcast_ref::<breadcrumbs::Error>(), Some(breadcrumbs::Error::Config(_)))
    });
    if config {
        1
    } else {
        2
    }
}
