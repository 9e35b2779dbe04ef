//! Desk-scale experiments: does training on a release help a model on the
//! benchmark, and how much of a prompt can be read back out of its cache?

mod audit;
mod experiment;
mod inversion;
pub mod tasks;

pub use audit::{structural_unlearnability_check, Clause, ModelInput, RecordingDecoder, StructuralReport, MIN_SCAN_BYTES};
pub use experiment::{
    mean_sd, run_contamination_experiment, ArmDelta, ArmSummary, ContaminationMode, ExperimentConfig, LabReport,
    TrialOutcome, SCOPE_NOTE,
};
pub use inversion::{
    attack_file, inversion_probe, noise_file, AttackConfig, AttackKind, Family, InversionExperiment, InversionReport,
    Recovery, MAX_BUDGET,
};
