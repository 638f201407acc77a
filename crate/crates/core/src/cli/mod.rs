//! Config files and the command implementations behind the `spn` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_ablate, cmd_audit, cmd_eval, cmd_gradcheck, cmd_masks, cmd_train, load_dataset, AblateOutcome};
pub use config::{DatasetSpec, ExperimentConfig, RawConfig, DATA_ROOT_ENV};
