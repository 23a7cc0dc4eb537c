//! Fusion of an outcome-free covariate panel with external regression
//! summaries, using exponential-tilting weights to correct covariate shift.

pub mod data;
pub mod error;
pub mod fusion;
pub mod glm;
pub mod inference;
pub mod nls;
pub mod sim;
pub mod tilt;

pub use data::{
    load_panel, load_summary, validate_problem, Block, CovariatePanel, Diagnostics, FusionProblem, MarginalEntry,
    MarginalSummary, PanelRow, PanelSchema, StudyDesign, SummaryInput, SummarySlot,
};
pub use error::{Error, Result};
pub use fusion::{
    estimate, solve_calibrated, solve_case_control, solve_homogeneous, solve_known_weights, stacked_system,
    EstimatorConfig, FullModelParams, FusionResult, Method, Mode,
};
pub use glm::{fit_glm, fit_working_glm, linear_predictor, mean_response, score_row, Family, LinearPredictorSpec};
pub use inference::{
    beta_names, parametric_bootstrap, sandwich_covariance, BootstrapResult, CovarianceSource, JointEstimate,
    PipelineConfig, ReplicateRecord, StreamPolicy,
};
pub use sim::{
    build_replicate, generate_population, run_comparison, sample_case_control, sample_from_population, sample_study,
    selection_score, CovariateModel, Design, Population, Scenario, SimConfig, SimOutput, SimSummary,
};
pub use tilt::{
    feature_map, fit_tilt, fit_tilt_univariable, frobenius_gap, reconstruct_entries, reconstruct_info,
    reconstruct_info_case_control, select_tilt, weight, weights, EntryMask, FisherMatrix, Term, TiltFit, TiltOptions,
    TiltPreset, TiltSelection, TiltSpec,
};
