//! Experiment orchestration for the fluctuation laboratory: configuration,
//! verification reports, and the experiment drivers behind the CLI.

pub mod config;
pub mod experiments;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Sim(#[from] fluctlab_core::simulate::SimError),
    #[error(transparent)]
    Stats(#[from] fluctlab_core::statistics::StatsError),
    #[error(transparent)]
    Operator(#[from] fluctlab_core::operators::OperatorError),
    #[error(transparent)]
    Mwi(#[from] fluctlab_core::mwi::MwiError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub use config::ExperimentConfig;
pub use report::{emit_report, VerificationReport};

/// Run the experiment named in the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<VerificationReport, HarnessError> {
    match cfg.experiment.as_str() {
        "example31" => experiments::example31::run_example31(cfg),
        "clt-verify" => experiments::clt::run_clt_experiment(cfg),
        "common-factor" => experiments::common_factor::run_common_factor_experiment(cfg),
        "dynkin-check" => experiments::dynkin::run_dynkin_check(cfg),
        "operator-diag" => experiments::operator_diag::run_operator_diagnostics(cfg),
        "mwi-check" => experiments::mwi_check::run_mwi_check(cfg),
        other => Err(HarnessError::Config(config::ConfigError::UnknownPreset(
            other.to_string(),
        ))),
    }
}
